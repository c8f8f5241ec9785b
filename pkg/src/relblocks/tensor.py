"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a float64 numpy array. Operations executed while a
``Tape`` is active record nodes (parent handles + local-gradient closures)
whenever an input is tracked, so ``backward`` can sweep the tape in reverse
creation order, which is a valid topological order by construction.

Tensors are immutable values after creation; a tape is single-writer and
confined to one worker. Broadcasting in binary ops follows numpy semantics
internally (gradients are summed over broadcast axes); the public
``forward_primitive`` dispatcher restricts it to a leading batch axis.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
ELU_ALPHA = 1.0  # standard ELU default

_id_counter = itertools.count(1)


class ShapeMismatchError(ValueError):
    pass


class NumericDomainError(FloatingPointError):
    pass


class Tensor:
    """Immutable dense array with an optional handle onto an autodiff tape."""

    __slots__ = ("data", "tid", "tape")

    def __init__(self, data, tid: int | None = None, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tid = tid
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def tracked(self) -> bool:
        return self.tid is not None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tid={self.tid})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mulc(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A leaf tensor that always participates in gradient computation."""
    return Tensor(data, tid=next(_id_counter))


class Tape:
    """Recorded primitive operations; reverse order of ``nodes`` is the sweep order."""

    __slots__ = ("nodes",)

    def __init__(self):
        # each node: (out_tid, parent_tids, backfn) with backfn(out_grad) -> parent grads
        self.nodes: list[tuple[int, tuple[int, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out: np.ndarray, parents: Sequence[Tensor], backfn: Callable) -> Tensor:
        tid = next(_id_counter)
        ptids = tuple(p.tid for p in parents)
        self.nodes.append((tid, ptids, backfn))
        return Tensor(out, tid=tid, tape=self)


_ACTIVE_TAPE: Tape | None = None


def _emit(out: np.ndarray, parents: Sequence[Tensor], backfn: Callable) -> Tensor:
    """Record a node if a tape is active and any parent is tracked."""
    tape = _ACTIVE_TAPE
    if tape is not None and any(p.tid is not None for p in parents):
        tracked = [p for p in parents if p.tid is not None]
        if len(tracked) != len(parents):
            idx = [i for i, p in enumerate(parents) if p.tid is not None]

            def backfn_masked(g, _inner=backfn, _idx=idx):
                full = _inner(g)
                return [full[i] for i in _idx]

            return tape.record(out, tracked, backfn_masked)
        return tape.record(out, parents, backfn)
    return Tensor(out)


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; returns gradients keyed by grad_id.

    Parameters listed in ``params`` that are unreachable from the loss get a
    zero gradient entry. Gradients always match their tensor's shape.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.tape is None:
        raise RuntimeError("loss is not on a live tape")
    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for out_tid, ptids, backfn in reversed(loss.tape.nodes):
        g = grads.get(out_tid)
        if g is None:
            continue
        pgrads = backfn(g)
        for tid, pg in zip(ptids, pgrads):
            if pg is None:
                continue
            acc = grads.get(tid)
            grads[tid] = pg if acc is None else acc + pg
    if params is not None:
        for p in params:
            if p.tid not in grads:
                grads[p.tid] = np.zeros_like(p.data)
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcast during the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def back(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)]

    return _emit(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def back(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)]

    return _emit(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def back(g):
        return [_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)]

    return _emit(out, (a, b), back)


def mulc(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def back(g):
        return [g * c]

    return _emit(out, (a,), back)


def addc(a: Tensor, c: float) -> Tensor:
    out = a.data + c

    def back(g):
        return [g]

    return _emit(out, (a,), back)


def powc(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    ad = a.data

    def back(g):
        return [g * p * ad ** (p - 1.0)]

    return _emit(out, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatchError(
            f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if bd.ndim > 1 else np.outer(g, bd).reshape(ad.shape)
        gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim > 1 else np.outer(ad, g).reshape(bd.shape)
        return [_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)]

    return _emit(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) with x of shape (..., in) and w of shape (in, out)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatchError(
            f"linear: input dim {x.data.shape[-1]} != weight rows {w.data.shape[0]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    xd, wd = x.data, w.data

    def back(g):
        gx = g @ wd.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0).reshape(b.data.shape))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, parents, back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeMismatchError("concat of empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return list(np.split(g, splits, axis=axis))

    return _emit(out, tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatchError("stack of empty list")
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _emit(out, tuple(tensors), back)


def take_slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = x.data[sl]
    shape = x.data.shape

    def back(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[sl] = g
        return [gx]

    return _emit(out, (x,), back)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather (embedding lookup); gradient scatter-adds into the table."""
    idx = np.asarray(idx)
    out = table.data[idx]
    shape = table.data.shape

    def back(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, idx, g)
        return [gt]

    return _emit(out, (table,), back)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()
    old = x.data.shape

    def back(g):
        return [_unbroadcast(g, old)]

    return _emit(out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    old = x.data.shape

    def back(g):
        return [g.reshape(old)]

    return _emit(out, (x,), back)


def transpose_last2(x: Tensor) -> Tensor:
    out = np.swapaxes(x.data, -1, -2)

    def back(g):
        return [np.swapaxes(g, -1, -2)]

    return _emit(out, (x,), back)


def elu(x: Tensor, alpha: float = ELU_ALPHA) -> Tensor:
    xd = x.data
    out = np.where(xd > 0, xd, alpha * np.expm1(xd))

    def back(g):
        return [np.where(xd > 0, g, g * (out + alpha))]

    return _emit(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0.0)

    def back(g):
        return [np.where(xd > 0, g, 0.0)]

    return _emit(out, (x,), back)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(g):
        return [g * (1.0 - out * out)]

    return _emit(out, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def back(g):
        return [g * out * (1.0 - out)]

    return _emit(out, (x,), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def back(g):
        return [g * out]

    return _emit(out, (x,), back)


def log(x: Tensor) -> Tensor:
    xd = x.data
    out = np.log(xd)

    def back(g):
        return [g / xd]

    return _emit(out, (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [(g - dot) * out]

    return _emit(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def back(g):
        return [g - sm * g.sum(axis=axis, keepdims=True)]

    return _emit(out, (x,), back)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.data.shape
    n = x.data.size if axis is None else shape[axis]

    def back(g):
        if axis is None:
            return [np.full(shape, float(g) / n, dtype=DTYPE)]
        ge = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(ge / n, shape).copy()]

    return _emit(out, (x,), back)


def summ(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def back(g):
        if axis is None:
            return [np.full(shape, float(g), dtype=DTYPE)]
        ge = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(ge, shape).copy()]

    return _emit(out, (x,), back)


def maxr(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max-reduce along one axis; ties route their gradient to the first argmax."""
    xd = x.data
    out = xd.max(axis=axis, keepdims=keepdims)
    arg = np.expand_dims(xd.argmax(axis=axis), axis)

    def back(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, arg, ge, axis=axis)
        return [gx]

    return _emit(out, (x,), back)


# ---------------------------------------------------------------------------
# primitive dispatch (validated public surface)
# ---------------------------------------------------------------------------

PRIMITIVES = ("matmul", "add", "mul_elementwise", "concat_lastdim",
              "softmax_lastdim", "elu", "tanh", "sigmoid", "mean_axis",
              "max_axis", "linear")


def _check_finite(inputs: Sequence[Tensor]):
    for i, t in enumerate(inputs):
        if not np.all(np.isfinite(t.data)):
            raise NumericDomainError(f"input {i} contains NaN or Inf")


def _check_batch_broadcast(a: Tensor, b: Tensor, op: str):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    lo, hi = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(hi) - len(lo) == 1 and hi[1:] == lo:
        return  # broadcast over a single leading batch axis
    raise ShapeMismatchError(
        f"{op}: shapes {sa} and {sb} conform neither exactly nor via a "
        f"leading batch axis")


def forward_primitive(op_kind: str, inputs: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Validated dispatcher over the registered primitive set.

    Elementwise binary kinds accept equal shapes or broadcasting over one
    leading batch axis only; inputs must be finite.
    """
    if op_kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive {op_kind!r}; known: {PRIMITIVES}")
    _check_finite(inputs)
    if op_kind == "matmul":
        return matmul(inputs[0], inputs[1])
    if op_kind == "add":
        _check_batch_broadcast(inputs[0], inputs[1], "add")
        return add(inputs[0], inputs[1])
    if op_kind == "mul_elementwise":
        _check_batch_broadcast(inputs[0], inputs[1], "mul_elementwise")
        return mul(inputs[0], inputs[1])
    if op_kind == "concat_lastdim":
        lead = inputs[0].data.shape[:-1]
        for t in inputs[1:]:
            if t.data.shape[:-1] != lead:
                raise ShapeMismatchError(
                    f"concat_lastdim: leading dims {t.data.shape[:-1]} != {lead}")
        return concat(inputs, axis=-1)
    if op_kind == "softmax_lastdim":
        return softmax(inputs[0], axis=-1)
    if op_kind == "elu":
        return elu(inputs[0])
    if op_kind == "tanh":
        return tanh(inputs[0])
    if op_kind == "sigmoid":
        return sigmoid(inputs[0])
    if op_kind == "mean_axis":
        return mean(inputs[0], axis=axis)
    if op_kind == "max_axis":
        return maxr(inputs[0], axis=axis)
    if op_kind == "linear":
        return linear(*inputs)
    raise AssertionError(op_kind)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, epsilon: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central|).

    ``f`` maps a tensor to a scalar and must be evaluable at perturbed points.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    p = parameter(point.data.copy())
    with Tape():
        out = f(p)
        if out.data.size != 1:
            raise ShapeMismatchError("grad_check expects a scalar-valued function")
        analytic = backward(out, params=[p])[p.tid]
    flat = point.data.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        x = flat.copy()
        x[i] += epsilon
        hi = f(Tensor(x.reshape(point.data.shape))).item()
        x[i] -= 2 * epsilon
        lo = f(Tensor(x.reshape(point.data.shape))).item()
        numeric[i] = (hi - lo) / (2 * epsilon)
    numeric = numeric.reshape(point.data.shape)
    denom = np.maximum(1.0, np.abs(numeric))
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))

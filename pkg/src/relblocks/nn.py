"""Parameter containers and small network blocks on top of the tensor engine.

All randomness flows through the numpy Generator handed to each constructor;
weights use uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, parameter


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Base container; submodules and parameters are discovered from __dict__."""

    def parameters(self) -> list[Tensor]:
        seen = set()
        out = []
        for _, p in self.named_parameters():
            if p.tid not in seen:
                seen.add(p.tid)
                out.append(p)
        return out

    def named_parameters(self, prefix: str = ""):
        for name, val in self.__dict__.items():
            key = f"{prefix}{name}"
            yield from _walk(key, val)


def _walk(key, val):
    if isinstance(val, Tensor):
        if val.tid is not None:
            yield key, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=key + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(f"{key}.{i}", v)
    elif isinstance(val, dict):
        for k, v in val.items():
            yield from _walk(f"{key}.{k}", v)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.w = uniform_init(rng, (d_in, d_out), d_in)
        self.b = uniform_init(rng, (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LSTMCell(Module):
    """Gate order in the fused weight: input, forget, cell, output."""

    def __init__(self, rng, d_in: int, d_hid: int):
        self.d_hid = d_hid
        self.wx = uniform_init(rng, (d_in, 4 * d_hid), d_in)
        self.wh = uniform_init(rng, (d_hid, 4 * d_hid), d_hid)
        self.b = uniform_init(rng, (4 * d_hid,), d_hid)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor):
        z = T.linear(x, self.wx, self.b) + T.linear(h, self.wh)
        d = self.d_hid
        i = T.sigmoid(T.take_slice(z, -1, 0, d))
        f = T.sigmoid(T.take_slice(z, -1, d, 2 * d))
        g = T.tanh(T.take_slice(z, -1, 2 * d, 3 * d))
        o = T.sigmoid(T.take_slice(z, -1, 3 * d, 4 * d))
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, c_new


class LSTM(Module):
    """Single-layer unidirectional pass over a list of (batch, d_in) steps."""

    def __init__(self, rng, d_in: int, d_hid: int):
        self.cell = LSTMCell(rng, d_in, d_hid)
        self.d_hid = d_hid

    def __call__(self, steps: list[Tensor]):
        lead = steps[0].shape[:-1]
        h = Tensor(np.zeros(lead + (self.d_hid,)))
        c = Tensor(np.zeros(lead + (self.d_hid,)))
        states = []
        for x in steps:
            h, c = self.cell(x, h, c)
            states.append(h)
        return states, h


class BiLSTM(Module):
    """Bidirectional encoder; per-step states and the joined final state are d_out wide."""

    def __init__(self, rng, d_in: int, d_out: int):
        if d_out % 2 != 0:
            raise ValueError(f"BiLSTM output dim must be even, got {d_out}")
        self.fwd = LSTM(rng, d_in, d_out // 2)
        self.bwd = LSTM(rng, d_in, d_out // 2)

    def __call__(self, steps: list[Tensor]):
        f_states, f_last = self.fwd(steps)
        b_states, b_last = self.bwd(steps[::-1])
        b_states = b_states[::-1]
        joined = [T.concat([f, b], axis=-1) for f, b in zip(f_states, b_states)]
        final = T.concat([f_last, b_last], axis=-1)
        return joined, final


class BatchNorm(Module):
    """Feature-wise normalization over the batch axis with running eval stats."""

    def __init__(self, rng, d: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            mu = T.mean(x, axis=0, keepdims=True)
            xc = x - mu
            var = T.mean(xc * xc, axis=0, keepdims=True)
            inv = T.powc(T.addc(var, self.eps), -0.5)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.ravel()
            self.running_var = (1 - m) * self.running_var + m * var.data.ravel()
            return xc * inv * self.gamma + self.beta
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return (x - Tensor(self.running_mean)) * Tensor(inv) * self.gamma + self.beta


class Adam(Module):
    """Adam with the cited defaults; lr may be rescheduled between epochs."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.tid: np.zeros_like(p.data) for p in params}
        self.v = {p.tid: np.zeros_like(p.data) for p in params}
        self.t = 0

    def step(self, grads: dict[int, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = grads[p.tid]
            m = self.m[p.tid] = b1 * self.m[p.tid] + (1 - b1) * g
            v = self.v[p.tid] = b2 * self.v[p.tid] + (1 - b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def pack_params(params: list[Tensor]) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in params]) if params else np.zeros(0)


def unpack_params(params: list[Tensor], flat: np.ndarray):
    off = 0
    for p in params:
        n = p.data.size
        p.data[...] = flat[off:off + n].reshape(p.data.shape)
        off += n


def model_grad_check(forward_fn, params: list[Tensor], epsilon: float = 1e-5) -> float:
    """Central-difference check of d(forward_fn())/d(params).

    ``forward_fn`` must be deterministic across calls (re-seed any sampling
    inside the closure). Returns the max relative error over all coordinates.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    with T.Tape():
        loss = forward_fn()
        grads = T.backward(loss, params=params)
    analytic = np.concatenate([grads[p.tid].ravel() for p in params])
    flat0 = pack_params(params)
    numeric = np.empty_like(flat0)
    try:
        for i in range(flat0.size):
            x = flat0.copy()
            x[i] += epsilon
            unpack_params(params, x)
            hi = forward_fn().item()
            x[i] -= 2 * epsilon
            unpack_params(params, x)
            lo = forward_fn().item()
            numeric[i] = (hi - lo) / (2 * epsilon)
    finally:
        unpack_params(params, flat0)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat0.size else 0.0

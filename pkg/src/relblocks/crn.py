"""Conditional Relation Network unit.

The unit maps an ordered array of n same-shaped objects and a conditioning
feature to k_max - 1 relation objects (one per tuple size k = 2..k_max), via
subset sampling, a set function g, a conditioning function h, and average
aggregation p. Objects are vectors (..., d) or matrices (..., rows, d); a
conditioning vector broadcasts over the row axis of matrix objects.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeMismatchError, Tensor

CONDITIONING_VARIANTS = ("additive", "multiplicative", "sequential_additive",
                         "sequential_multiplicative", "dual")

# index subsets below this population size are drawn by enumeration
_ENUMERATION_LIMIT = 200_000


@dataclass
class CRNConfig:
    d: int
    k_max: int
    t: int = 2
    conditioning: str = "multiplicative"
    g_mode: str = "average"  # or "concat"
    exhaustive: bool = False

    def __post_init__(self):
        if self.k_max < 2:
            raise ValueError(f"k_max must be >= 2, got {self.k_max}")
        if self.t <= 0:
            raise ValueError(f"t must be positive, got {self.t}")
        if self.conditioning not in CONDITIONING_VARIANTS:
            raise ValueError(f"unknown conditioning {self.conditioning!r}; "
                             f"choose from {CONDITIONING_VARIANTS}")
        if self.g_mode not in ("average", "concat"):
            raise ValueError(f"g_mode must be 'average' or 'concat', got {self.g_mode!r}")


class ObjectArray:
    """Ordered, temporally meaningful collection of same-shaped tensors."""

    def __init__(self, objects: list[Tensor]):
        if len(objects) < 1:
            raise ShapeMismatchError("ObjectArray needs at least one object")
        shape = objects[0].shape
        for i, o in enumerate(objects):
            if o.shape != shape:
                raise ShapeMismatchError(
                    f"object {i} has shape {o.shape}, expected {shape}")
        self.objects = list(objects)
        self.member_shape = shape

    def __len__(self):
        return len(self.objects)

    def __getitem__(self, i):
        return self.objects[i]

    def __iter__(self):
        return iter(self.objects)


@dataclass
class RelationOutput:
    """Per-k relation results, ordered by tuple size k = 2..k_max."""
    results: list[Tensor]
    subsets: dict[int, list[tuple[int, ...]]] = field(default_factory=dict)

    def __len__(self):
        return len(self.results)

    def __iter__(self):
        return iter(self.results)


def sample_subsets(x, k: int, t: int, rng: np.random.Generator,
                   exhaustive: bool = False) -> list[tuple[int, ...]]:
    """Draw t size-k index subsets of x, each with strictly increasing indices.

    Without replacement among the C(n, k) possibilities while t <= C(n, k),
    with replacement otherwise. ``exhaustive`` returns every subset once.
    """
    n = len(x) if not isinstance(x, int) else x
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")
    if not 2 <= k < n:
        raise ValueError(f"subset size k={k} must satisfy 2 <= k < n={n}")
    total = comb(n, k)
    if exhaustive:
        return list(itertools.combinations(range(n), k))
    if t <= total:
        if total <= _ENUMERATION_LIMIT:
            pool = list(itertools.combinations(range(n), k))
            picks = rng.choice(total, size=t, replace=False)
            return [pool[i] for i in picks]
        seen: set[tuple[int, ...]] = set()
        while len(seen) < t:
            seen.add(tuple(sorted(rng.choice(n, size=k, replace=False).tolist())))
        return sorted(seen)
    return [tuple(sorted(rng.choice(n, size=k, replace=False).tolist()))
            for _ in range(t)]


def _broadcast_cond(c: Tensor, ref: Tensor) -> Tensor:
    """Expand a conditioning vector over the row axis of a matrix object."""
    if c.ndim == ref.ndim:
        return c if c.shape == ref.shape else T.broadcast_to(c, ref.shape)
    if c.ndim + 1 != ref.ndim:
        raise ShapeMismatchError(
            f"conditioning shape {c.shape} does not align with object shape {ref.shape}")
    expanded = T.reshape(c, c.shape[:-1] + (1,) + c.shape[-1:])
    return T.broadcast_to(expanded, ref.shape)


class CRNUnit(nn.Module):
    """One CRN with per-k sub-network weights (g, h are not shared across k)."""

    def __init__(self, rng: np.random.Generator, cfg: CRNConfig):
        self.cfg = cfg
        d = cfg.d
        self.g_proj: dict[int, nn.Linear] = {}
        if cfg.g_mode == "concat":
            for k in range(2, cfg.k_max + 1):
                self.g_proj[k] = nn.Linear(rng, k * d, d)
        self.h_net: dict[int, nn.Module] = {}
        width = {"additive": 2, "multiplicative": 3, "dual": 5,
                 "sequential_additive": 2, "sequential_multiplicative": 3}[cfg.conditioning]
        for k in range(2, cfg.k_max + 1):
            if cfg.conditioning.startswith("sequential"):
                self.h_net[k] = nn.BiLSTM(rng, width * d, d)
            else:
                self.h_net[k] = nn.Linear(rng, width * d, d)

    # -- sub-networks -------------------------------------------------------

    def relation_g(self, subset_objects: list[Tensor], k: int | None = None) -> Tensor:
        """Join a subset into one object: average pooling or concat + projection."""
        if len(subset_objects) == 0:
            raise ShapeMismatchError("relation_g: empty subset")
        if self.cfg.g_mode == "average":
            if len(subset_objects) == 1:
                return subset_objects[0]
            return T.mean(T.stack(subset_objects, axis=0), axis=0)
        k = len(subset_objects) if k is None else k
        return self.g_proj[k](T.concat(subset_objects, axis=-1))

    def condition_h(self, k: int, g_out, c: Tensor, c2: Tensor | None = None) -> Tensor:
        """Fuse the relation with the conditioning feature(s).

        Non-sequential variants take a single joined object; sequential
        variants take the ordered subset itself and run a biLSTM over the
        per-element conditioned sequence, max-pooled over time.
        """
        variant = self.cfg.conditioning
        if variant == "dual" and c2 is None:
            raise ValueError("dual conditioning requires a second signal c2")
        net = self.h_net[k]
        if variant.startswith("sequential"):
            seq = list(g_out)
            parts = []
            for x in seq:
                cb = _broadcast_cond(c, x)
                if variant == "sequential_multiplicative":
                    parts.append(T.concat([x, x * cb, cb], axis=-1))
                else:
                    parts.append(T.concat([x, cb], axis=-1))
            states, _ = net(parts)
            return T.maxr(T.stack(states, axis=0), axis=0)
        x = g_out
        cb = _broadcast_cond(c, x)
        if variant == "additive":
            z = T.concat([x, cb], axis=-1)
        elif variant == "multiplicative":
            z = T.concat([x, x * cb, cb], axis=-1)
        else:  # dual
            c2b = _broadcast_cond(c2, x)
            z = T.concat([x, x * cb, x * c2b, cb, c2b], axis=-1)
        return T.elu(net(z))

    # -- full unit ----------------------------------------------------------

    def forward(self, x, c: Tensor, rng: np.random.Generator,
                c2: Tensor | None = None) -> RelationOutput:
        """Run the unit: sample, relate, condition, aggregate for each k.

        Returns k_max - 1 results for n > 2 and a single result for n = 2.
        """
        objs = x.objects if isinstance(x, ObjectArray) else list(x)
        n = len(objs)
        if n < 2:
            raise ShapeMismatchError(f"CRN input needs n >= 2 objects, got {n}")
        if n == 2:
            subset = (0, 1)
            h = self._apply_subset(2, [objs[0], objs[1]], c, c2)
            r = T.mean(T.stack([h], axis=0), axis=0)
            return RelationOutput([r], {2: [subset]})
        if self.cfg.k_max >= n:
            raise ValueError(f"k_max={self.cfg.k_max} must be < n={n}")
        results = []
        chosen: dict[int, list[tuple[int, ...]]] = {}
        for k in range(2, self.cfg.k_max + 1):
            subsets = sample_subsets(n, k, self.cfg.t, rng,
                                     exhaustive=self.cfg.exhaustive)
            chosen[k] = subsets
            hs = [self._apply_subset(k, [objs[i] for i in s], c, c2)
                  for s in subsets]
            results.append(hs[0] if len(hs) == 1
                           else T.mean(T.stack(hs, axis=0), axis=0))
        return RelationOutput(results, chosen)

    def _apply_subset(self, k, subset_objs, c, c2):
        if self.cfg.conditioning.startswith("sequential"):
            return self.condition_h(k, subset_objs, c, c2)
        return self.condition_h(k, self.relation_g(subset_objs, k), c, c2)


def cost_estimate(t: int, k_max: int, K: int, F: int) -> tuple[float, float]:
    """Leading-constant inference cost of one unit: (set-function, conditioning).

    K is the per-object element count (rows) and F the element embedding size;
    the set-function term is (t/2) * k_max * (k_max-1) * K * F and the
    conditioning term (4t+2) * (k_max-1) * K * F^2.
    """
    for name, v in (("t", t), ("k_max", k_max), ("K", K), ("F", F)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    cost_g = 0.5 * t * k_max * (k_max - 1) * K * F
    cost_h = (4 * t + 2) * (k_max - 1) * K * F * F
    return cost_g, cost_h

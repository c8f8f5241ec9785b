"""Grounding-based attention priors: child-sum TreeLSTM encoding over supplied
constituency trees, pooling of supplied grounding scores, the entity-to-word
attention mapping, and the KL regularization losses. Regularization applies in
training only; inference never adds these terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeMismatchError, Tensor

KL_EPS = 1e-8


class ParseTree:
    """Constituency tree as a parent array; leaves are nodes 0..S-1 in word order."""

    def __init__(self, parents: list[int], tags: list[str],
                 re_flags: list[bool]):
        n = len(parents)
        if not (len(tags) == len(re_flags) == n):
            raise ValueError("parents, tags and re_flags must have equal length")
        roots = [i for i, p in enumerate(parents) if p == -1]
        if len(roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(roots)}")
        self.parents = list(parents)
        self.tags = list(tags)
        self.re_flags = list(re_flags)
        self.root = roots[0]
        self.children: list[list[int]] = [[] for _ in range(n)]
        for i, p in enumerate(parents):
            if p == -1:
                continue
            if not 0 <= p < n:
                raise ValueError(f"node {i} has out-of-range parent {p}")
            self.children[p].append(i)
        # reachability from the root doubles as the acyclicity check
        seen = set()
        stack = [self.root]
        while stack:
            i = stack.pop()
            if i in seen:
                raise ValueError("tree contains a cycle")
            seen.add(i)
            stack.extend(self.children[i])
        if len(seen) != n:
            raise ValueError("tree is disconnected")
        leaves = sorted(i for i in range(n) if not self.children[i])
        if leaves != list(range(len(leaves))):
            raise ValueError("leaves must be exactly the first S node ids in word order")
        self.num_leaves = len(leaves)
        self.num_nodes = n

    def bottom_up_order(self) -> list[int]:
        order: list[int] = []
        stack = [(self.root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
            else:
                stack.append((node, True))
                for ch in self.children[node]:
                    stack.append((ch, False))
        return order

    def leaf_span(self, node: int) -> list[int]:
        span = []
        stack = [node]
        while stack:
            i = stack.pop()
            if not self.children[i]:
                span.append(i)
            else:
                stack.extend(self.children[i])
        return sorted(span)

    def referring_expressions(self) -> list[int]:
        return [i for i, f in enumerate(self.re_flags) if f]

    def to_json(self) -> dict:
        return {"parents": self.parents, "tags": self.tags,
                "re_flags": self.re_flags}

    @classmethod
    def from_json(cls, obj: dict) -> "ParseTree":
        return cls(obj["parents"], obj["tags"], obj["re_flags"])


class ChildSumTreeLSTM(nn.Module):
    """Bottom-up recurrence with per-child forget gates, order-invariant in children."""

    def __init__(self, rng, d_in: int, d: int):
        self.d = d
        self.w_f = nn.Linear(rng, d_in, d)
        self.u_f = nn.Linear(rng, d, d, bias=False)
        self.w_c = nn.Linear(rng, d_in, d)
        self.u_c = nn.Linear(rng, d, d, bias=False)
        self.w_i = nn.Linear(rng, d_in, d)
        self.u_i = nn.Linear(rng, d, d, bias=False)
        self.w_o = nn.Linear(rng, d_in, d)
        self.u_o = nn.Linear(rng, d, d, bias=False)
        self.d_in = d_in

    def encode(self, tree: ParseTree, leaf_inputs: list[Tensor]):
        """Returns (per-node hidden list, root hidden). Internal nodes take no input."""
        if len(leaf_inputs) != tree.num_leaves:
            raise ShapeMismatchError(
                f"tree has {tree.num_leaves} leaves but got {len(leaf_inputs)} inputs")
        lead = leaf_inputs[0].shape[:-1]
        zero_x = Tensor(np.zeros(lead + (self.d_in,)))
        hidden: list[Tensor | None] = [None] * tree.num_nodes
        cell: list[Tensor | None] = [None] * tree.num_nodes
        for i in tree.bottom_up_order():
            x = leaf_inputs[i] if i < tree.num_leaves else zero_x
            kids = tree.children[i]
            if kids:
                h_sum = hidden[kids[0]]
                for k in kids[1:]:
                    h_sum = h_sum + hidden[k]
            else:
                h_sum = Tensor(np.zeros(lead + (self.d,)))
            c_tilde = T.tanh(self.w_c(x) + self.u_c(h_sum))
            gate_i = T.sigmoid(self.w_i(x) + self.u_i(h_sum))
            gate_o = T.sigmoid(self.w_o(x) + self.u_o(h_sum))
            c = gate_i * c_tilde
            for k in kids:
                f_ik = T.sigmoid(self.w_f(x) + self.u_f(hidden[k]))
                c = c + f_ik * cell[k]
            cell[i] = c
            hidden[i] = gate_o * T.tanh(c)
        return hidden, hidden[tree.root]


@dataclass
class GroundingPriors:
    """Pooled word- and region-level association targets (each sums to 1)."""
    word_mean: np.ndarray
    region_mean: np.ndarray
    gamma_star: np.ndarray
    beta_star: np.ndarray


def _normalize(v: np.ndarray) -> np.ndarray:
    total = v.sum()
    if total <= 0:
        return np.full_like(v, 1.0 / len(v))
    return v / total


def pool_priors(word_scores: np.ndarray, region_scores: np.ndarray) -> GroundingPriors:
    """Opinion-pool per-RE scores by arithmetic mean, then renormalize.

    ``word_scores``: (R, S) with zeros outside each RE's member words;
    ``region_scores``: (R, N).
    """
    word_scores = np.atleast_2d(np.asarray(word_scores, dtype=float))
    region_scores = np.atleast_2d(np.asarray(region_scores, dtype=float))
    if word_scores.shape[0] == 0 or region_scores.shape[0] == 0:
        raise ValueError("prior pooling needs at least one referring expression")
    if word_scores.min() < 0 or region_scores.min() < 0 or \
            word_scores.max() > 1 or region_scores.max() > 1:
        raise ValueError("association scores must lie in [0, 1]")
    wm = word_scores.mean(axis=0)
    rm = region_scores.mean(axis=0)
    return GroundingPriors(word_mean=wm, region_mean=rm,
                           gamma_star=_normalize(wm), beta_star=_normalize(rm))


class EntityWordMapper(nn.Module):
    """Distributes entity-level attention onto each entity's leaf span.

    Within a span the split is a learned softmax over member words scored from
    the word vector and the attended visual feature; total mass is conserved.
    """

    def __init__(self, rng, d: int):
        self.w_word = nn.Linear(rng, d, d)
        self.w_vis = nn.Linear(rng, d, d, bias=False)
        self.score = nn.Linear(rng, d, 1, bias=False)

    def __call__(self, alpha: Tensor, spans: list[list[int]], words: Tensor,
                 v_hat: Tensor) -> Tensor:
        """``alpha``: (B, T) over entities; ``words``: (B, S, d); returns (B, S)."""
        b, s = words.shape[0], words.shape[-2]
        raw = T.reshape(self.score(T.tanh(
            self.w_word(words) + _vis_expand(self.w_vis(v_hat), s))), (b, s))
        gamma = None
        for e, span in enumerate(spans):
            if not span:
                raise ValueError(f"entity {e} has an empty leaf span")
            mask = np.full((1, s), -np.inf)
            mask[0, span] = 0.0
            local = T.softmax(raw + Tensor(mask), axis=-1)   # zero off-span
            weighted = local * T.take_slice(alpha, -1, e, e + 1)
            gamma = weighted if gamma is None else gamma + weighted
        return gamma


def _vis_expand(v: Tensor, s: int) -> Tensor:
    e = T.reshape(v, v.shape[:-1] + (1,) + v.shape[-1:])
    return T.broadcast_to(e, v.shape[:-1] + (s,) + v.shape[-1:])


def kl_attention_loss(pred: Tensor, prior) -> Tensor:
    """KL(prior || pred) with both sides eps-smoothed and renormalized.

    ``pred`` is a tape tensor (batched rows allowed); ``prior`` is a constant
    distribution. Batched inputs return the row mean.
    """
    prior = np.asarray(prior.data if isinstance(prior, Tensor) else prior,
                       dtype=float)
    if prior.min() < 0:
        raise ValueError("prior has negative entries")
    if pred.data.min() < -1e-12:
        raise ValueError("predicted attention has negative entries")
    prior = prior + KL_EPS
    prior = prior / prior.sum(axis=-1, keepdims=True)
    p = T.addc(pred, KL_EPS)
    p = p * T.powc(T.summ(p, axis=-1, keepdims=True), -1.0)
    ce = T.summ(Tensor(prior) * T.log(p), axis=-1)
    kl = Tensor(np.sum(prior * np.log(prior), axis=-1)) - ce
    return T.mean(kl) if kl.ndim > 0 else kl


def combined_loss(l_vqa: Tensor, l_ling: Tensor | None, l_vis: Tensor | None,
                  lambda_l: float, lambda_v: float) -> Tensor:
    """Training objective l_vqa + lambda_l * l_ling + lambda_v * l_vis."""
    if lambda_l < 0 or lambda_v < 0:
        raise ValueError("regularization weights must be nonnegative")
    total = l_vqa
    if l_ling is not None and lambda_l > 0:
        total = total + T.mulc(l_ling, lambda_l)
    if l_vis is not None and lambda_v > 0:
        total = total + T.mulc(l_vis, lambda_v)
    return total

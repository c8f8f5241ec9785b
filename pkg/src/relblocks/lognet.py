"""Language-binding object graph reasoning: dynamic visual graphs built under
linguistic control, word-object binding, residual GCN refinement, and a
working memory updated over T recurrent steps. Parameters are per-step."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np

from . import nn
from . import tensor as T
from .hcrn import QueryEncoding
from .tensor import NumericDomainError, ShapeMismatchError, Tensor


@dataclass
class VisualObjects:
    """Region appearance vectors plus normalized 7-dim box geometry.

    ``appearance``: (batch, N, d_appearance); ``boxes``: (batch, N, 7) laid
    out as [x1, y1, x2, y2, w, h, w*h] with coordinates in [0, 1].
    """
    appearance: Tensor
    boxes: Tensor

    def __post_init__(self):
        b = self.boxes.data
        if b.shape[-1] != 7:
            raise ShapeMismatchError(f"boxes must be 7-dim, got {b.shape[-1]}")
        if b[..., :4].min() < -1e-9 or b[..., :4].max() > 1 + 1e-9:
            raise ValueError("box coordinates must lie in [0, 1]")
        if not np.allclose(b[..., 6], b[..., 4] * b[..., 5], atol=1e-9):
            raise ValueError("7th box entry must equal width * height")

    @property
    def count(self):
        return self.appearance.shape[-2]


@dataclass
class DynamicGraph:
    node_features: Tensor   # modulated description matrix, (batch, N, r)
    adjacency: Tensor       # symmetric PSD, rank <= r, (batch, N, N)


@dataclass
class ReasoningState:
    memory: Tensor                 # (batch, d)
    controls: list[Tensor]         # K control vectors, each (batch, d)
    step: int


@dataclass
class StepTrace:
    word_attention: Tensor         # alpha, (batch, K, S)
    binding: Tensor                # beta, (batch, N, S)
    node_attention: Tensor         # delta, (batch, N)
    adjacency: Tensor              # (batch, N, N)


def _expand(c: Tensor, axis_len: int) -> Tensor:
    e = T.reshape(c, c.shape[:-1] + (1,) + c.shape[-1:])
    return T.broadcast_to(e, c.shape[:-1] + (axis_len,) + c.shape[-1:])


class LogStep(nn.Module):
    """One reasoning pass: all sub-network weights belong to this step."""

    def __init__(self, rng, d: int, heads: int, rank: int, gcn_layers: int):
        self.d = d
        self.heads = heads
        self.rank = rank
        self.gcn_layers = gcn_layers
        self.augment = nn.Linear(rng, 2 * d, d)
        self.q_proj = nn.Linear(rng, d, d)
        self.qc_proj = nn.Linear(rng, 2 * d, d)
        self.gamma_logits = nn.uniform_init(rng, (heads,), heads)
        self.alpha_score = [nn.Linear(rng, d, 1, bias=False) for _ in range(heads)]
        self.vtilde = nn.Linear(rng, d, rank, bias=False)
        self.vhat = nn.Linear(rng, 2 * d, d)
        self.word_gate_in = nn.Linear(rng, d, d)
        self.word_gate_out = nn.Linear(rng, d, 1)
        self.bind_v = nn.Linear(rng, d, d)
        self.bind_w = nn.Linear(rng, d, d, bias=False)
        self.bind_score = nn.Linear(rng, d, 1, bias=False)
        self.gcn_in = [nn.Linear(rng, 2 * d, d) for _ in range(gcn_layers)]
        self.gcn_out = [nn.Linear(rng, d, 2 * d, bias=False) for _ in range(gcn_layers)]
        self.delta_score = nn.Linear(rng, 2 * d, 1, bias=False)
        self.mem = nn.Linear(rng, 3 * d, d)

    # -- the five step operations -------------------------------------------

    def augment_nodes(self, v: Tensor, m_prev: Tensor) -> Tensor:
        """W[v_i; m (*) v_i] + b over all N nodes."""
        if v.shape[-1] != m_prev.shape[-1]:
            raise ShapeMismatchError(
                f"node dim {v.shape[-1]} != memory dim {m_prev.shape[-1]}")
        mb = _expand(m_prev, v.shape[-2])
        return self.augment(T.concat([v, v * mb], axis=-1))

    def controller(self, words: Tensor, q: Tensor, prev_controls: list[Tensor]):
        """Multi-head word attention driven by the step query and past controls.

        ``words``: (batch, S, d). Returns (controls, alpha) with alpha of
        shape (batch, K, S); each head's row is a distribution over words.
        """
        if words.shape[-2] == 0:
            raise ShapeMismatchError("controller needs at least one word")
        q_t = self.q_proj(q)
        if prev_controls is None:
            prev_controls = [q_t] * self.heads  # first step: past control is q_1
        gam = T.softmax(T.reshape(self.gamma_logits, (1, self.heads)), axis=-1)
        mixed = None
        for k in range(self.heads):
            term = prev_controls[k] * T.take_slice(gam, -1, k, k + 1)
            mixed = term if mixed is None else mixed + term
        q_prime = self.qc_proj(T.concat([q_t, mixed], axis=-1))
        qp = _expand(q_prime, words.shape[-2])
        controls, alphas = [], []
        for k in range(self.heads):
            logits = T.reshape(self.alpha_score[k](words * qp), words.shape[:-1])
            a = T.softmax(logits, axis=-1)                       # (B, S)
            c = T.summ(words * T.reshape(a, a.shape + (1,)), axis=-2)
            controls.append(c)
            alphas.append(a)
        return controls, T.stack(alphas, axis=-2)

    def build_adjacency(self, v: Tensor, controls: list[Tensor]) -> DynamicGraph:
        """Rank-r symmetric adjacency from the control-modulated description."""
        modulated = None
        for c in controls:
            term = v * _expand(c, v.shape[-2])
            modulated = term if modulated is None else modulated + term
        desc = T.softmax(self.vtilde(modulated), axis=-2)        # (B, N, r)
        adj = T.matmul(desc, T.transpose_last2(desc))            # (B, N, N)
        return DynamicGraph(node_features=desc, adjacency=adj)

    def language_binding(self, v_t: Tensor, words: Tensor, m_prev: Tensor):
        """Attach a gated word composition to every node; returns (x, beta)."""
        n, s = v_t.shape[-2], words.shape[-2]
        v_hat = self.vhat(T.concat([v_t, v_t * _expand(m_prev, n)], axis=-1))
        z = T.sigmoid(self.word_gate_out(self.word_gate_in(words)))  # (B, S, 1)
        vs = T.reshape(self.bind_v(v_hat), v_hat.shape[:-2] + (n, 1, self.d))
        ws = T.reshape(self.bind_w(words), words.shape[:-2] + (1, s, self.d))
        scores = T.reshape(self.bind_score(T.tanh(vs + ws)),
                           v_t.shape[:-2] + (n, s))
        beta = T.softmax(scores, axis=-1) * T.reshape(z, z.shape[:-2] + (1, s))
        wexp = T.reshape(words, words.shape[:-2] + (1, s, self.d))
        bound = T.summ(T.reshape(beta, beta.shape + (1,)) * wexp, axis=-2)
        return T.concat([v_t, bound], axis=-1), beta

    def refine(self, x: Tensor, adjacency: Tensor) -> Tensor:
        """Residual GCN stack R_h = ELU(R + W2 ELU(W1 R A + b))."""
        r = x
        for h in range(self.gcn_layers):
            msg = T.matmul(adjacency, r)
            f = self.gcn_out[h](T.elu(self.gcn_in[h](msg)))
            r = T.elu(r + f)
            if not np.all(np.isfinite(r.data)):
                raise NumericDomainError(f"refinement diverged at GCN layer {h}")
        return r

    def readout_update(self, refined: Tensor, m_prev: Tensor):
        """Graph summary and memory update; returns (summary, memory, delta)."""
        logits = T.reshape(self.delta_score(refined), refined.shape[:-1])
        delta = T.softmax(logits, axis=-1)                       # (B, N)
        summary = T.summ(refined * T.reshape(delta, delta.shape + (1,)), axis=-2)
        memory = self.mem(T.concat([m_prev, summary], axis=-1))
        return summary, memory, delta

    def forward(self, v_fused: Tensor, words: Tensor, q: Tensor,
                state: ReasoningState):
        m_prev = state.memory
        prev_controls = state.controls
        step = state.step + 1
        v_t = self.augment_nodes(v_fused, m_prev)
        controls, alpha = self.controller(words, q, prev_controls)
        graph = self.build_adjacency(v_t, controls)
        x, beta = self.language_binding(v_t, words, m_prev)
        refined = self.refine(x, graph.adjacency)
        _, memory, delta = self.readout_update(refined, m_prev)
        trace = StepTrace(word_attention=alpha, binding=beta,
                          node_attention=delta, adjacency=graph.adjacency)
        return ReasoningState(memory=memory, controls=controls, step=step), trace


class LOGNet(nn.Module):
    """T chained reasoning steps over fused region features.

    ``forward`` returns the final memory and the per-step traces used both by
    the answer head and by attention-prior regularization.
    """

    def __init__(self, rng, d: int, d_appearance: int, steps: int = 6,
                 gcn_layers: int = 4, heads: int = 2, rank: int | None = None):
        if steps < 1:
            raise ValueError(f"need at least one reasoning step, got {steps}")
        self.d = d
        self.rank = ceil(d / 8) if rank is None else rank
        self.fusion = nn.Linear(rng, d_appearance + 7, d)
        self.memory_init = nn.uniform_init(rng, (d,), d)
        self.steps = [LogStep(rng, d, heads, self.rank, gcn_layers)
                      for _ in range(steps)]

    def fuse(self, objects: VisualObjects) -> Tensor:
        return self.fusion(T.concat([objects.appearance, objects.boxes], axis=-1))

    def forward(self, objects: VisualObjects, enc: QueryEncoding):
        v = self.fuse(objects)
        words = T.stack(enc.words, axis=-2)                      # (B, S, d)
        b = v.shape[0]
        m0 = T.broadcast_to(T.reshape(self.memory_init, (1, self.d)), (b, self.d))
        state = ReasoningState(memory=m0, controls=None, step=0)
        traces: list[StepTrace] = []
        for step in self.steps:
            state, trace = step.forward(v, words, enc.q, state)
            traces.append(trace)
        return state.memory, traces

    @staticmethod
    def averaged_attention(traces: list[StepTrace]):
        """Step-averaged word and region attention for prior regularization.

        Word attention additionally averages over heads; region attention is
        the mean of the per-step node attention.
        """
        n_steps = len(traces)
        word = None
        region = None
        for tr in traces:
            w = T.mean(tr.word_attention, axis=-2)               # heads -> (B, S)
            word = w if word is None else word + w
            region = tr.node_attention if region is None else region + tr.node_attention
        return T.mulc(word, 1.0 / n_steps), T.mulc(region, 1.0 / n_steps)

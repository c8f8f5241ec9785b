"""Hierarchical CRN streams: clip/video visual hierarchy, textual stream,
clip temporal attention, and the question-driven readout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .crn import CRNConfig, CRNUnit, ObjectArray
from .tensor import ShapeMismatchError, Tensor


@dataclass
class ClipBatch:
    """N clips of T frame features plus per-clip motion features.

    ``appearance``: (batch, N, T, d_in); ``motion``: (batch, N, d_in). The
    video-level motion vector is the final state of the stream's recurrent
    summarizer over the projected clip motions.
    """
    appearance: Tensor
    motion: Tensor

    @property
    def num_clips(self):
        return self.appearance.shape[1]

    @property
    def frames_per_clip(self):
        return self.appearance.shape[2]


@dataclass
class QueryEncoding:
    words: list[Tensor]          # S contextual word vectors, each (batch, d)
    q: Tensor                    # global query vector (batch, d)
    answers: list[Tensor] | None = None  # optional choice vectors


@dataclass
class SubtitleSegments:
    """M overlapping word-vector segments plus the whole-passage word set.

    ``segments``: (batch, M, T_words, d_in); ``passage``: (batch, S, d_in).
    The passage conditioning vector is max-pooled after modulation.
    """
    segments: Tensor
    passage: Tensor


def _tile(c: Tensor, count: int) -> Tensor:
    """(B, d) -> (B, count, d) for conditioning batched unit instances."""
    e = T.reshape(c, (c.shape[0], 1, c.shape[-1]))
    return T.broadcast_to(e, (c.shape[0], count, c.shape[-1]))


def preselect(lin: nn.Linear, obj: Tensor, q: Tensor) -> Tensor:
    """Question-gated modulation W[x; x * q] applied along the last axis."""
    if obj.shape[-1] != q.shape[-1]:
        raise ShapeMismatchError(
            f"preselect: object dim {obj.shape[-1]} != query dim {q.shape[-1]}")
    qb = q
    while qb.ndim < obj.ndim:
        qb = T.reshape(qb, qb.shape[:-1] + (1,) + qb.shape[-1:])
    qb = T.broadcast_to(qb, obj.shape)
    return lin(T.concat([obj, obj * qb], axis=-1))


class ClipTemporalAttention(nn.Module):
    """Question-conditioned weighted frame sum with a bilinear-gated score.

    Frames may carry a spatial axis (batch, rows, d); scores use their mean
    over rows while the weighted sum keeps the full frames.
    """

    def __init__(self, rng, d: int):
        self.w_q = nn.Linear(rng, d, d)
        self.w_v = nn.Linear(rng, d, d)
        self.score = nn.Linear(rng, d, 1, bias=False)

    def __call__(self, frames, q: Tensor):
        frames = list(frames)
        if not frames:
            raise ShapeMismatchError("clip temporal attention needs frames")
        qe = self.w_q(q)
        scores = []
        for f in frames:
            pooled = T.mean(f, axis=-2) if f.ndim > q.ndim else f
            scores.append(self.score(qe * self.w_v(pooled)))
        logits = T.concat(scores, axis=-1)
        weights = T.softmax(logits, axis=-1)
        out = None
        for t, f in enumerate(frames):
            w = T.take_slice(weights, -1, t, t + 1)
            while w.ndim < f.ndim:
                w = T.reshape(w, w.shape[:-1] + (1,) + w.shape[-1:])
            term = f * w
            out = term if out is None else out + term
        return out, weights


def _next_count(n: int) -> int:
    """Output array length of one unit at the default k_max = n - 1."""
    return 1 if n == 2 else n - 2


class VisualStream(nn.Module):
    """Stacked CRN hierarchy over clips and video (optionally sub-videos).

    Each level runs a motion-conditioned additive unit followed by a
    question-conditioned multiplicative unit; with ``motion=False`` (long-form
    adaptation) only the question-conditioned units remain. All units at one
    level share weights across the clip/group instances they are applied to.
    """

    def __init__(self, rng, d: int, num_clips: int, frames_per_clip: int,
                 d_in: int | None = None, t: int = 2, grouping=None,
                 motion: bool = True, exhaustive: bool = False):
        d_in = d if d_in is None else d_in
        self.d = d
        self.num_clips = num_clips
        self.frames_per_clip = frames_per_clip
        self.grouping = tuple(grouping) if grouping else None
        self.motion = motion
        if self.grouping:
            n1, n2 = self.grouping
            if n1 * n2 != num_clips:
                raise ValueError(
                    f"grouping {self.grouping} must factorize num_clips={num_clips}")
            if n2 == 1:
                # single-clip hyper-clips are a pass-through level
                self.grouping = None
        if num_clips < 3:
            raise ValueError(f"stacked video level needs >= 3 clips, got {num_clips}")

        self.appearance_proj = nn.Linear(rng, d_in, d)
        self.motion_proj = nn.Linear(rng, d_in, d) if motion else None
        self.motion_rnn = nn.LSTM(rng, d, d) if motion else None
        self.video_motion_proj = nn.Linear(rng, d, d) if motion else None
        self.group_motion_proj = (nn.Linear(rng, d, d)
                                  if motion and self.grouping else None)
        self.question_proj = nn.Linear(rng, d, d)

        self.stages: list[dict] = []
        self.units: list[CRNUnit] = []
        rows = 1
        n = frames_per_clip
        n = self._plan_level(rng, "clip", n, rows, t, exhaustive)
        rows = n * rows
        if self.grouping:
            n = self._plan_level(rng, "subvideo", self.grouping[1], rows, t, exhaustive)
            rows = n * rows
            n = self._plan_level(rng, "video", self.grouping[0], rows, t, exhaustive)
        else:
            n = self._plan_level(rng, "video", num_clips, rows, t, exhaustive)
        self.out_objects = n
        self.out_rows = rows
        self.num_slots = n * rows

    def _plan_level(self, rng, level: str, n: int, rows: int, t: int,
                    exhaustive: bool) -> int:
        roles = (("motion", "additive"), ("question", "multiplicative")) \
            if self.motion else (("question", "multiplicative"),)
        for role, variant in roles:
            if n < 2:
                raise ValueError(
                    f"{level}-level {role} unit would receive n={n} objects; "
                    f"shape chain so far: {self.shape_chain()}")
            k_max = 2 if n == 2 else n - 1
            cfg = CRNConfig(d=self.d, k_max=k_max, t=t, conditioning=variant,
                            exhaustive=exhaustive)
            self.units.append(CRNUnit(rng, cfg))
            n_out = _next_count(n)
            self.stages.append({"level": level, "role": role, "variant": variant,
                                "n_in": n, "n_out": n_out, "k_max": k_max,
                                "rows": rows})
            n = n_out
        return n

    def shape_chain(self) -> str:
        return " -> ".join(f"{s['level']}/{s['role']}:{s['n_in']}->{s['n_out']}"
                           for s in self.stages)

    def predict_shapes(self) -> dict:
        return {"stages": [dict(s) for s in self.stages],
                "out_objects": self.out_objects, "out_rows": self.out_rows,
                "num_slots": self.num_slots}

    def _stage_units(self, level: str) -> list[CRNUnit]:
        return [u for u, s in zip(self.units, self.stages) if s["level"] == level]

    def _run_level(self, level: str, objs: list[Tensor], motion_c: Tensor | None,
                   question_c: Tensor, rng) -> list[Tensor]:
        units = self._stage_units(level)
        if self.motion:
            objs = units[0].forward(objs, motion_c, rng).results
            objs = units[1].forward(objs, question_c, rng).results
        else:
            objs = units[0].forward(objs, question_c, rng).results
        return objs

    def forward(self, batch: ClipBatch, enc: QueryEncoding, rng) -> Tensor:
        """Returns the flattened readout slots, shape (batch, H', d)."""
        b, n_clips, t_frames = batch.appearance.shape[:3]
        if n_clips != self.num_clips or t_frames != self.frames_per_clip:
            raise ShapeMismatchError(
                f"stream built for {self.num_clips}x{self.frames_per_clip}, "
                f"got {n_clips}x{t_frames}")
        app = self.appearance_proj(batch.appearance)  # (B, N, T, d)
        qp = self.question_proj(enc.q)

        frames = [T.reshape(T.take_slice(app, 2, j, j + 1), (b, n_clips, self.d))
                  for j in range(t_frames)]
        if self.motion:
            mot = self.motion_proj(batch.motion)  # (B, N, d)
            mot_steps = [T.reshape(T.take_slice(mot, 1, i, i + 1), (b, self.d))
                         for i in range(n_clips)]
        else:
            mot = None
        clip_objs = self._run_level("clip", frames,
                                    mot, _tile(qp, n_clips), rng)
        clip_out = T.stack(clip_objs, axis=2)  # (B, N, T', d)
        rows = clip_out.shape[2]

        if self.grouping:
            p, qn = self.grouping
            grouped = T.reshape(clip_out, (b, p, qn, rows, self.d))
            objs = [T.reshape(T.take_slice(grouped, 2, j, j + 1),
                              (b, p, rows, self.d)) for j in range(qn)]
            if self.motion:
                gm = T.reshape(mot, (b, p, qn, self.d))
                gm_steps = [T.reshape(T.take_slice(gm, 2, j, j + 1),
                                      (b, p, self.d)) for j in range(qn)]
                _, g_last = self.motion_rnn(gm_steps)
                group_motion = self.group_motion_proj(g_last)  # (B, P, d)
            else:
                group_motion = None
            sub_objs = self._run_level("subvideo", objs, group_motion,
                                       _tile(qp, p), rng)
            sub_out = T.stack(sub_objs, axis=2)  # (B, P, Q', T', d)
            rows = sub_out.shape[2] * rows
            sub_out = T.reshape(sub_out, (b, p, rows, self.d))
            video_in = [T.reshape(T.take_slice(sub_out, 1, i, i + 1),
                                  (b, rows, self.d)) for i in range(p)]
        else:
            video_in = [T.reshape(T.take_slice(clip_out, 1, i, i + 1),
                                  (b, rows, self.d)) for i in range(n_clips)]

        if self.motion:
            _, v_last = self.motion_rnn(mot_steps)
            video_motion = self.video_motion_proj(v_last)  # (B, d)
        else:
            video_motion = None
        video_objs = self._run_level("video", video_in, video_motion, qp, rng)
        out = T.stack(video_objs, axis=1)  # (B, V', rows, d)
        slots = T.reshape(out, (b, out.shape[1] * out.shape[2], self.d))
        if slots.shape[1] != self.num_slots:
            raise ShapeMismatchError(
                f"executed slot count {slots.shape[1]} != planned "
                f"{self.num_slots}; chain: {self.shape_chain()}")
        return slots


class TextualStream(nn.Module):
    """Pre-selected subtitle segments related by one passage-conditioned unit."""

    def __init__(self, rng, d: int, num_segments: int, d_in: int | None = None,
                 t: int = 2, conditioning: str = "multiplicative",
                 exhaustive: bool = False):
        if num_segments < 3:
            raise ValueError(f"textual stream needs >= 3 segments, got {num_segments}")
        d_in = d if d_in is None else d_in
        self.d = d
        self.num_segments = num_segments
        self.segment_proj = nn.Linear(rng, d_in, d)
        self.passage_proj = nn.Linear(rng, d_in, d)
        self.preselect_segment = nn.Linear(rng, 2 * d, d)
        self.preselect_passage = nn.Linear(rng, 2 * d, d)
        self.unit = CRNUnit(rng, CRNConfig(d=d, k_max=num_segments - 1, t=t,
                                           conditioning=conditioning,
                                           exhaustive=exhaustive))

    def forward(self, subs: SubtitleSegments, enc: QueryEncoding, rng) -> Tensor:
        b, m = subs.segments.shape[:2]
        if m != self.num_segments:
            raise ShapeMismatchError(
                f"stream built for {self.num_segments} segments, got {m}")
        seg = self.segment_proj(subs.segments)      # (B, M, Tw, d)
        seg_mod = preselect(self.preselect_segment, seg, enc.q)
        objs = [T.reshape(T.take_slice(seg_mod, 1, i, i + 1),
                          (b,) + seg_mod.shape[2:]) for i in range(m)]
        passage = self.passage_proj(subs.passage)   # (B, S, d)
        pass_mod = preselect(self.preselect_passage, passage, enc.q)
        cond = T.maxr(pass_mod, axis=1)             # (B, d)
        out = self.unit.forward(objs, cond, rng).results
        stacked = T.stack(out, axis=1)              # (B, M-2, Tw, d)
        return T.maxr(T.maxr(stacked, axis=2), axis=1)


class QuestionDrivenReadout(nn.Module):
    """Softmax-weighted average of slots driven by the question (and choice)."""

    def __init__(self, rng, d: int, multi_choice: bool = False):
        self.o_proj = nn.Linear(rng, d, d, bias=False)
        self.q_proj = nn.Linear(rng, d, d, bias=False)
        self.a_proj = nn.Linear(rng, d, d, bias=False) if multi_choice else None
        width = 3 if multi_choice else 2
        self.gate = nn.Linear(rng, width * d, d)
        self.logit = nn.Linear(rng, d, 1)

    def __call__(self, slots, q: Tensor, a: Tensor | None = None):
        if isinstance(slots, (list, ObjectArray)):
            slots = T.stack(list(slots), axis=-2)
        if slots.shape[-2] < 1:
            raise ShapeMismatchError("readout needs at least one slot")
        op = self.o_proj(slots)                      # (B, H', d)
        qp = _tile(self.q_proj(q), slots.shape[-2])
        parts = [op, op * qp]
        if a is not None:
            if self.a_proj is None:
                raise ValueError("readout was built without an answer path")
            parts.append(op * _tile(self.a_proj(a), slots.shape[-2]))
        gated = T.elu(self.gate(T.concat(parts, axis=-1)))
        logits = T.reshape(self.logit(gated), slots.shape[:-1])
        gamma = T.softmax(logits, axis=-1)           # (B, H')
        weighted = slots * T.reshape(gamma, gamma.shape + (1,))
        return T.summ(weighted, axis=-2), gamma


class QueryEncoder(nn.Module):
    """Token embedding followed by a biLSTM; exposes contextual words and q.

    ``init_rows`` seeds the leading embedding rows from task feature vectors
    (the stand-in for pretrained word vectors), rescaled to the init norm.
    """

    def __init__(self, rng, vocab_size: int, d: int,
                 init_rows: np.ndarray | None = None):
        self.table = nn.uniform_init(rng, (vocab_size, d), d)
        if init_rows is not None:
            rows, cols = init_rows.shape
            if rows > vocab_size or cols > d:
                raise ShapeMismatchError(
                    f"init rows {init_rows.shape} exceed table {(vocab_size, d)}")
            self.table.data[:rows, :] = 0.0
            self.table.data[:rows, :cols] = init_rows / np.sqrt(3.0)
        self.rnn = nn.BiLSTM(rng, d, d)

    def __call__(self, tokens: np.ndarray) -> QueryEncoding:
        tokens = np.asarray(tokens)
        steps = [T.take_rows(self.table, tokens[..., s])
                 for s in range(tokens.shape[-1])]
        words, q = self.rnn(steps)
        return QueryEncoding(words=words, q=q)

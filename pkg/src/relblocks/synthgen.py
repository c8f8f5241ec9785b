"""Deterministic generators of desk-scale QA tasks with rule-computed labels.

Symbol and attribute features are frozen random near-orthogonal codebooks per
seed, so the visual backbone stays out of scope while labels remain exactly
recomputable from the emitted records. Datasets serialize to JSON lines with
a single header record followed by one record per sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .decoders import AnswerSpace

SEQUENCE_KINDS = ("count_symbol", "transition_order")
SCENE_KINDS = ("attribute_query", "relation_query")
RELATIONS = ("left_of", "right_of", "above", "below")
# (dx, dy) in grid cells from anchor to target
_REL_DELTA = {"left_of": (-1, 0), "right_of": (1, 0),
              "above": (0, -1), "below": (0, 1)}

COUNT_LABELS = list(range(11))


@dataclass
class Sample:
    id: int
    split: str
    question: list[int]
    label: int
    frames: list[int] | None = None          # sequence tasks: symbol per slot
    choices: list[list[int]] | None = None   # multi-choice candidates
    objects: list[dict] | None = None        # scene tasks: attrs + grid cell
    grounding: dict | None = None            # parse tree + oracle priors

    def to_json(self) -> dict:
        rec = {"id": self.id, "split": self.split,
               "question": self.question, "label": self.label}
        for key in ("frames", "choices", "objects", "grounding"):
            val = getattr(self, key)
            if val is not None:
                rec[key] = val
        return rec


@dataclass
class SyntheticTask:
    kind: str
    seed: int
    config: dict
    vocab: list[str]
    codebooks: dict[str, np.ndarray]
    answer_space: AnswerSpace
    samples: list[Sample] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def token_id(self, name: str) -> int:
        return self.vocab.index(name)


def _orthogonalish(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Frozen unit vectors, orthonormal whenever count <= dim."""
    raw = rng.standard_normal((max(count, 1), dim))
    if count <= dim:
        q, _ = np.linalg.qr(raw.T)
        return q.T[:count].copy()
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _assign_splits(n_samples: int, val_fraction: float) -> list[str]:
    n_val = int(round(n_samples * val_fraction))
    return ["train"] * (n_samples - n_val) + ["val"] * n_val


# ---------------------------------------------------------------------------
# sequence tasks
# ---------------------------------------------------------------------------

def gen_sequence_task(kind: str, num_clips: int, frames_per_clip: int,
                      vocab: int, n_samples: int, seed: int,
                      feature_dim: int = 16, noise_sigma: float = 0.0,
                      val_fraction: float = 0.1) -> SyntheticTask:
    """Symbol-stream tasks: repetition counting or two-state order questions."""
    if kind not in SEQUENCE_KINDS:
        raise ValueError(f"unknown sequence task kind {kind!r}")
    if vocab < 2:
        raise ValueError(f"need >= 2 symbols, got {vocab}")
    length = num_clips * frames_per_clip
    if kind == "count_symbol" and length < max(COUNT_LABELS):
        raise ValueError(
            f"stream length {length} cannot realize counts up to {max(COUNT_LABELS)}")
    rng = np.random.default_rng(seed)
    symbols = [f"sym{i}" for i in range(vocab)]
    extra = ["count"] if kind == "count_symbol" else ["order", "then"]
    names = symbols + extra
    codebook = _orthogonalish(rng, vocab, feature_dim)
    config = {"kind": kind, "num_clips": num_clips,
              "frames_per_clip": frames_per_clip, "vocab": vocab,
              "n_samples": n_samples, "feature_dim": feature_dim,
              "noise_sigma": noise_sigma, "val_fraction": val_fraction}
    if kind == "count_symbol":
        space = AnswerSpace(labels=COUNT_LABELS, kind="count")
    else:
        space = AnswerSpace(labels=[0, 1], kind="multi_choice")
    task = SyntheticTask(kind=kind, seed=seed, config=config, vocab=names,
                         codebooks={"symbol": codebook}, answer_space=space)

    splits = _assign_splits(n_samples, val_fraction)
    labels = [space.labels[i % len(space.labels)] for i in range(n_samples)]
    rng.shuffle(labels)
    for sid in range(n_samples):
        if kind == "count_symbol":
            task.samples.append(_make_count_sample(task, rng, sid, splits[sid],
                                                   labels[sid], length))
        else:
            task.samples.append(_make_transition_sample(task, rng, sid,
                                                        splits[sid], labels[sid],
                                                        length))
    return task


def _make_count_sample(task, rng, sid, split, count, length) -> Sample:
    vocab = task.config["vocab"]
    target = int(rng.integers(0, vocab))
    others = [s for s in range(vocab) if s != target]
    frames = [int(rng.choice(others)) for _ in range(length)]
    for pos in rng.choice(length, size=count, replace=False):
        frames[pos] = target
    question = [task.token_id("count"), target]
    return Sample(id=sid, split=split, question=question, label=count,
                  frames=frames)


def _make_transition_sample(task, rng, sid, split, label, length) -> Sample:
    vocab = task.config["vocab"]
    a, b = rng.choice(vocab, size=2, replace=False)
    change = int(rng.integers(1, length))
    frames = [int(a)] * change + [int(b)] * (length - change)
    then = task.token_id("then")
    truth = [int(a), then, int(b)]
    flipped = [int(b), then, int(a)]
    choices = [truth, flipped] if label == 0 else [flipped, truth]
    question = [task.token_id("order"), int(a), int(b)] if label == 0 \
        else [task.token_id("order"), int(b), int(a)]
    return Sample(id=sid, split=split, question=question, label=label,
                  frames=frames, choices=choices)


# ---------------------------------------------------------------------------
# scene tasks
# ---------------------------------------------------------------------------

def gen_scene_task(kind: str, n_objects: int, n_samples: int, seed: int,
                   n_colors: int = 6, n_shapes: int = 4, grid=(3, 2),
                   attr_dim: int = 12, val_fraction: float = 0.1) -> SyntheticTask:
    """Grid scenes with color/shape-coded objects and spatial relation queries."""
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene task kind {kind!r}")
    if n_objects < 2:
        raise ValueError(f"need >= 2 objects, got {n_objects}")
    gx, gy = grid
    if n_objects > gx * gy:
        raise ValueError(f"{n_objects} objects do not fit a {gx}x{gy} grid")
    if n_colors < n_objects:
        raise ValueError("scene colors are distinct per object; need n_colors >= n_objects")
    rng = np.random.default_rng(seed)
    colors = [f"color{i}" for i in range(n_colors)]
    shapes = [f"shape{i}" for i in range(n_shapes)]
    names = colors + shapes + list(RELATIONS) + ["color?", "shape?"]
    config = {"kind": kind, "n_objects": n_objects, "n_samples": n_samples,
              "n_colors": n_colors, "n_shapes": n_shapes, "grid": list(grid),
              "attr_dim": attr_dim, "val_fraction": val_fraction}
    if kind == "attribute_query":
        labels = list(range(n_colors, n_colors + n_shapes))  # shape token ids
    else:
        labels = list(range(n_colors + n_shapes))            # any attribute value
    space = AnswerSpace(labels=labels, kind="open_ended")
    task = SyntheticTask(kind=kind, seed=seed, config=config, vocab=names,
                         codebooks={"color": _orthogonalish(rng, n_colors, attr_dim),
                                    "shape": _orthogonalish(rng, n_shapes, attr_dim)},
                         answer_space=space)
    splits = _assign_splits(n_samples, val_fraction)
    wanted = [labels[i % len(labels)] for i in range(n_samples)]
    rng.shuffle(wanted)
    for sid in range(n_samples):
        maker = _make_attribute_sample if kind == "attribute_query" \
            else _make_relation_sample
        task.samples.append(maker(task, rng, sid, splits[sid], wanted[sid]))
    return task


def _place_objects(task, rng):
    gx, gy = task.config["grid"]
    n = task.config["n_objects"]
    cells = rng.choice(gx * gy, size=n, replace=False)
    color_ids = rng.choice(task.config["n_colors"], size=n, replace=False)
    shape_ids = rng.integers(0, task.config["n_shapes"], size=n)
    return [{"color": int(c), "shape": int(s), "cell": [int(cell % gx), int(cell // gx)]}
            for c, s, cell in zip(color_ids, shape_ids, cells)]


def _make_attribute_sample(task, rng, sid, split, label_token) -> Sample:
    n_colors = task.config["n_colors"]
    objects = _place_objects(task, rng)
    anchor = int(rng.integers(0, len(objects)))
    objects[anchor]["shape"] = label_token - n_colors
    question = [task.token_id("shape?"), objects[anchor]["color"]]
    return Sample(id=sid, split=split, question=question, label=label_token,
                  objects=objects)


def _make_relation_sample(task, rng, sid, split, label_token) -> Sample:
    n_colors = task.config["n_colors"]
    gx, gy = task.config["grid"]
    want_color = label_token < n_colors
    for _ in range(1000):
        objects = _place_objects(task, rng)
        occupied = {tuple(o["cell"]): i for i, o in enumerate(objects)}
        relation = RELATIONS[int(rng.integers(0, len(RELATIONS)))]
        dx, dy = _REL_DELTA[relation]
        anchors = []
        for i, o in enumerate(objects):
            tcell = (o["cell"][0] + dx, o["cell"][1] + dy)
            if tcell in occupied:
                anchors.append((i, occupied[tcell]))
        if not anchors:
            continue
        anchor, target = anchors[int(rng.integers(0, len(anchors)))]
        if want_color:
            if objects[anchor]["color"] == label_token:
                continue  # anchor keeps its color; target must take the label
            swap = next((j for j, o in enumerate(objects)
                         if o["color"] == label_token), None)
            if swap is not None and swap != target:
                objects[swap]["color"] = objects[target]["color"]
            objects[target]["color"] = label_token
            question = [task.token_id("color?"), task.token_id(relation),
                        objects[anchor]["color"]]
        else:
            objects[target]["shape"] = label_token - n_colors
            question = [task.token_id("shape?"), task.token_id(relation),
                        objects[anchor]["color"]]
        return Sample(id=sid, split=split, question=question, label=label_token,
                      objects=objects)
    raise RuntimeError("could not satisfy the relation template after 1000 draws")


# ---------------------------------------------------------------------------
# grounding fixtures
# ---------------------------------------------------------------------------

def gen_grounding_fixture(task: SyntheticTask, focus: float = 0.95) -> SyntheticTask:
    """Attach template-derived parse trees and oracle priors to scene samples.

    Region priors concentrate ``focus`` mass on the answer-relevant object;
    word priors mark each referring expression's informative words.
    """
    if task.kind not in SCENE_KINDS:
        raise ValueError("grounding fixtures are defined for scene tasks")
    for sample in task.samples:
        sample.grounding = _grounding_record(task, sample, focus)
    return task


def _grounding_record(task: SyntheticTask, sample: Sample, focus: float) -> dict:
    n = len(sample.objects)
    target = recompute_label_object(task, sample)
    s = len(sample.question)
    if task.kind == "attribute_query":
        # [shape?, color] -> WHNP(leaf0), NP(leaf1), S(WHNP, NP)
        parents = [2, 3, 4, 4, -1]
        tags = ["W", "W", "WHNP", "NP", "S"]
        re_flags = [False, False, True, True, False]
        word_hits = {2: [0], 3: [1]}
    else:
        # [attr?, rel, color] -> WHNP(leaf0), NP(leaf2), PP(leaf1, NP), S(WHNP, PP)
        parents = [3, 5, 4, 6, 5, 6, -1]
        tags = ["W", "W", "W", "WHNP", "NP", "PP", "S"]
        re_flags = [False, False, False, True, True, False, False]
        word_hits = {3: [0], 4: [2]}
    res = [i for i, f in enumerate(re_flags) if f]
    word_scores, region_scores = [], []
    for node in res:
        w = np.zeros(s)
        w[word_hits[node]] = 1.0
        word_scores.append(w.tolist())
        r = np.full(n, (1.0 - focus) / (n - 1))
        r[target] = focus
        region_scores.append(r.tolist())
    return {"tree": {"parents": parents, "tags": tags, "re_flags": re_flags},
            "word_scores": word_scores, "region_scores": region_scores}


# ---------------------------------------------------------------------------
# label recomputation (round-trip oracle)
# ---------------------------------------------------------------------------

def recompute_label(task: SyntheticTask, sample: Sample) -> int:
    """Re-derive the label from the sample's stored content by the task rule."""
    if task.kind == "count_symbol":
        target = sample.question[1]
        return sum(1 for f in sample.frames if f == target)
    if task.kind == "transition_order":
        first = sample.frames[0]
        last = sample.frames[-1]
        for idx, choice in enumerate(sample.choices):
            if choice[0] == first and choice[2] == last:
                return idx
        raise ValueError("no candidate matches the stream order")
    if task.kind == "attribute_query":
        obj = sample.objects[recompute_label_object(task, sample)]
        return task.config["n_colors"] + obj["shape"]
    if task.kind == "relation_query":
        obj = sample.objects[recompute_label_object(task, sample)]
        if task.vocab[sample.question[0]] == "color?":
            return obj["color"]
        return task.config["n_colors"] + obj["shape"]
    raise ValueError(f"unknown kind {task.kind!r}")


def recompute_label_object(task: SyntheticTask, sample: Sample) -> int:
    """Index of the object whose attribute answers the question."""
    colors = {o["color"]: i for i, o in enumerate(sample.objects)}
    if task.kind == "attribute_query":
        return colors[sample.question[1]]
    anchor = sample.objects[colors[sample.question[2]]]
    relation = task.vocab[sample.question[1]]
    dx, dy = _REL_DELTA[relation]
    tcell = [anchor["cell"][0] + dx, anchor["cell"][1] + dy]
    for i, o in enumerate(sample.objects):
        if o["cell"] == tcell:
            return i
    raise ValueError("relation target missing; sample is inconsistent")


# ---------------------------------------------------------------------------
# feature materialization
# ---------------------------------------------------------------------------

def _slot_noise(task: SyntheticTask, sample_id: int, shape) -> np.ndarray:
    sigma = task.config.get("noise_sigma", 0.0)
    if not sigma:
        return np.zeros(shape)
    rng = np.random.default_rng(np.random.PCG64(task.seed * 1_000_003 + sample_id))
    return sigma * rng.standard_normal(shape)


def sequence_features(task: SyntheticTask, sample: Sample):
    """Returns (appearance (N, T, d), motion (N, d)) for one stream sample."""
    n, t = task.config["num_clips"], task.config["frames_per_clip"]
    feats = task.codebooks["symbol"][np.asarray(sample.frames)]
    feats = feats + _slot_noise(task, sample.id, feats.shape)
    feats = feats.reshape(n, t, -1)
    motion = np.diff(feats, axis=1).mean(axis=1) if t > 1 \
        else np.zeros((n, feats.shape[-1]))
    return feats, motion


def scene_features(task: SyntheticTask, sample: Sample):
    """Returns (appearance (N, 2*attr_dim), boxes (N, 7)) for one scene."""
    gx, gy = task.config["grid"]
    colors = task.codebooks["color"]
    shapes = task.codebooks["shape"]
    app, boxes = [], []
    for o in sample.objects:
        app.append(np.concatenate([colors[o["color"]], shapes[o["shape"]]]))
        cx, cy = o["cell"]
        w, h = 0.5 / gx, 0.5 / gy
        x1 = (cx + 0.25) / gx
        y1 = (cy + 0.25) / gy
        boxes.append([x1, y1, x1 + w, y1 + h, w, h, w * h])
    return np.asarray(app), np.asarray(boxes)


def materialize_sequence_batch(task: SyntheticTask, samples: list[Sample]) -> dict:
    apps, mots = zip(*(sequence_features(task, s) for s in samples))
    out = {"appearance": np.stack(apps), "motion": np.stack(mots),
           "question": np.array([s.question for s in samples]),
           "label": np.array([s.label for s in samples])}
    if samples[0].choices is not None:
        out["choices"] = np.array([s.choices for s in samples])
    return out


def materialize_scene_batch(task: SyntheticTask, samples: list[Sample]) -> dict:
    apps, boxes = zip(*(scene_features(task, s) for s in samples))
    out = {"appearance": np.stack(apps), "boxes": np.stack(boxes),
           "question": np.array([s.question for s in samples]),
           "label": np.array([task.answer_space.labels.index(s.label)
                              for s in samples])}
    if samples[0].grounding is not None:
        out["grounding"] = [s.grounding for s in samples]
    return out


# ---------------------------------------------------------------------------
# JSON-lines serialization
# ---------------------------------------------------------------------------

def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(task: SyntheticTask, path):
    header = {"kind": task.kind, "seed": task.seed, "config": task.config,
              "vocab": task.vocab,
              "codebooks": {k: v.tolist() for k, v in task.codebooks.items()},
              "answer_space": {"labels": task.answer_space.labels,
                               "kind": task.answer_space.kind}}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_canon({"header": header}) + "\n")
        for s in task.samples:
            fh.write(_canon(s.to_json()) + "\n")


def read_jsonl(path) -> SyntheticTask:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())["header"]
        task = SyntheticTask(
            kind=header["kind"], seed=header["seed"], config=header["config"],
            vocab=header["vocab"],
            codebooks={k: np.asarray(v) for k, v in header["codebooks"].items()},
            answer_space=AnswerSpace(labels=header["answer_space"]["labels"],
                                     kind=header["answer_space"]["kind"]))
        for line in fh:
            rec = json.loads(line)
            task.samples.append(Sample(
                id=rec["id"], split=rec["split"], question=rec["question"],
                label=rec["label"], frames=rec.get("frames"),
                choices=rec.get("choices"), objects=rec.get("objects"),
                grounding=rec.get("grounding")))
    return task

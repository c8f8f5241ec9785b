"""Training loop, evaluation, metrics logging, and checkpoint serialization."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import synthgen as sg
from . import tensor as T

_EVAL_STREAM = 0x5EED


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    lr_halve_every: int = 10
    seed: int = 0
    target_accuracy: float | None = None
    log_every: int = 0  # print a line per epoch when > 0


def materialize(task, samples):
    if task.kind in sg.SEQUENCE_KINDS:
        return sg.materialize_sequence_batch(task, samples)
    return sg.materialize_scene_batch(task, samples)


def _metric_for(task, preds, labels):
    if task.answer_space.kind == "count":
        return {"accuracy": float(np.mean(preds == labels)),
                "mse": float(np.mean((preds - labels) ** 2))}
    return {"accuracy": float(np.mean(preds == labels))}


class Trainer:
    """Adam training with a halving schedule and deterministic batch seeding."""

    def __init__(self, model, task, settings: TrainSettings, out_dir=None):
        self.model = model
        self.task = task
        self.settings = settings
        self.out_dir = out_dir
        self.params = model.parameters()
        self.opt = nn.Adam(self.params, lr=settings.lr)
        self.history: list[dict] = []
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)

    # -- data ------------------------------------------------------------------

    def _batches(self, samples, epoch: int, shuffle: bool):
        order = np.arange(len(samples))
        if shuffle:
            np.random.default_rng([self.settings.seed, epoch]).shuffle(order)
        bs = self.settings.batch_size
        for start in range(0, len(order), bs):
            chunk = [samples[i] for i in order[start:start + bs]]
            yield materialize(self.task, chunk)

    # -- evaluation ---------------------------------------------------------------

    def evaluate(self, split: str = "val") -> dict:
        samples = self.task.split(split)
        preds, labels, kls = [], [], []
        for i, batch in enumerate(self._batches(samples, 0, shuffle=False)):
            rng = np.random.default_rng([self.settings.seed, _EVAL_STREAM, i])
            preds.append(self.model.predict(batch, rng))
            labels.append(batch["label"])
            if "grounding" in batch and hasattr(self.model, "region_attention_kl"):
                kls.append(self.model.region_attention_kl(batch))
        metrics = _metric_for(self.task, np.concatenate(preds),
                              np.concatenate(labels))
        if kls:
            metrics["region_kl"] = float(np.mean(kls))
        return metrics

    def initial_loss(self) -> float:
        """Loss of the untouched model on the first (unshuffled) train batch."""
        batch = next(self._batches(self.task.split("train"), 0, shuffle=False))
        rng = np.random.default_rng([self.settings.seed, _EVAL_STREAM, 0])
        with T.Tape():
            loss = self.model.loss(batch, rng, train=True)
        return loss.item()

    # -- training -------------------------------------------------------------------

    def run(self) -> list[dict]:
        s = self.settings
        train = self.task.split("train")
        row = {"epoch": 0, "train_loss": self.initial_loss(), **self.evaluate()}
        self._log(row)
        for epoch in range(1, s.epochs + 1):
            self.opt.lr = s.lr * (0.5 ** ((epoch - 1) // s.lr_halve_every))
            losses = []
            for step, batch in enumerate(self._batches(train, epoch, shuffle=True)):
                rng = np.random.default_rng([s.seed, epoch, step])
                with T.Tape():
                    loss = self.model.loss(batch, rng, train=True)
                    grads = T.backward(loss, params=self.params)
                self.opt.step(grads)
                losses.append(loss.item())
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                   "lr": self.opt.lr, **self.evaluate()}
            self._log(row)
            if s.target_accuracy is not None and \
                    row["accuracy"] >= s.target_accuracy:
                break
        if self.out_dir is not None:
            save_checkpoint(self.model, os.path.join(self.out_dir, "checkpoint"),
                            config=getattr(self.task, "config", {}),
                            seed=s.seed)
        return self.history

    def _log(self, row: dict):
        self.history.append(row)
        if self.settings.log_every:
            print(json.dumps(row))
        if self.out_dir is not None:
            with open(os.path.join(self.out_dir, "metrics.jsonl"), "a",
                      encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian flat parameter binary
# ---------------------------------------------------------------------------

def _signature(model) -> list[tuple[str, list[int]]]:
    return [(name, list(p.shape)) for name, p in model.named_parameters()]


def save_checkpoint(model, prefix: str, config: dict | None = None,
                    seed: int | None = None):
    names, tensors = zip(*model.named_parameters())
    manifest = {"format": "<f8",
                "seed": seed,
                "config": config or {},
                "params": [{"name": n, "shape": list(p.shape)}
                           for n, p in zip(names, tensors)]}
    with open(prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    flat = np.concatenate([p.data.ravel() for p in tensors]).astype("<f8")
    with open(prefix + ".bin", "wb") as fh:
        fh.write(flat.tobytes())


def load_checkpoint(model, prefix: str):
    with open(prefix + ".json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    stored = [(p["name"], p["shape"]) for p in manifest["params"]]
    current = [(n, list(s)) for n, s in _signature(model)]
    if stored != current:
        raise ValueError(
            "checkpoint/model shape signatures differ.\n"
            f"checkpoint: {stored}\nmodel:      {current}")
    flat = np.frombuffer(open(prefix + ".bin", "rb").read(), dtype="<f8")
    offset = 0
    for _, p in model.named_parameters():
        n = p.data.size
        p.data[...] = flat[offset:offset + n].reshape(p.data.shape)
        offset += n
    if offset != flat.size:
        raise ValueError(f"checkpoint holds {flat.size} values, model needs {offset}")
    return manifest

"""Answer heads: open-ended classification, multi-choice ranking, count regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

COUNT_MIN, COUNT_MAX = 0, 10


@dataclass
class AnswerSpace:
    labels: list
    kind: str  # open_ended | multi_choice | count

    def __post_init__(self):
        if self.kind not in ("open_ended", "multi_choice", "count"):
            raise ValueError(f"unknown answer kind {self.kind!r}")
        if self.kind == "count" and list(self.labels) != list(range(COUNT_MIN, COUNT_MAX + 1)):
            raise ValueError("count answer space must be the 11 integers 0..10")

    def __len__(self):
        return len(self.labels)


class _JointEmbed(nn.Module):
    """Shared trunk: ELU(W[features...; Wq q + b] + b) followed by ELU(W y + b)."""

    def __init__(self, rng, d: int, n_features: int, with_answer: bool = False,
                 batchnorm: bool = False):
        extra = 2 if with_answer else 1
        self.q_proj = nn.Linear(rng, d, d)
        self.a_proj = nn.Linear(rng, d, d) if with_answer else None
        self.joint = nn.Linear(rng, (n_features + extra) * d, d)
        self.hidden = nn.Linear(rng, d, d)
        self.bn = nn.BatchNorm(rng, d) if batchnorm else None

    def __call__(self, features: list[Tensor], q: Tensor, a: Tensor | None = None,
                 train: bool = False) -> Tensor:
        parts = list(features) + [self.q_proj(q)]
        if self.a_proj is not None:
            if a is None:
                raise ValueError("this head was built with an answer-choice input")
            parts.append(self.a_proj(a))
        y = T.elu(self.joint(T.concat(parts, axis=-1)))
        if self.bn is not None:
            y = self.bn(y, train=train)
        return T.elu(self.hidden(y))


class OpenEndedHead(nn.Module):
    """Two ELU layers then softmax over the answer space."""

    def __init__(self, rng, d: int, n_answers: int, n_features: int = 1,
                 batchnorm: bool = False):
        if n_answers < 2:
            raise ValueError(f"answer space must hold >= 2 labels, got {n_answers}")
        self.trunk = _JointEmbed(rng, d, n_features, batchnorm=batchnorm)
        self.out = nn.Linear(rng, d, n_answers)

    def logits(self, features: list[Tensor], q: Tensor, train: bool = False) -> Tensor:
        return self.out(self.trunk(features, q, train=train))

    def __call__(self, features: list[Tensor], q: Tensor, train: bool = False) -> Tensor:
        return T.softmax(self.logits(features, q, train=train), axis=-1)

    def loss(self, features: list[Tensor], q: Tensor, labels: np.ndarray,
             train: bool = True) -> Tensor:
        logp = T.log_softmax(self.logits(features, q, train=train), axis=-1)
        b = logp.shape[0]
        picked = T.take_rows(T.reshape(logp, (-1,)),
                             np.arange(b) * logp.shape[-1] + np.asarray(labels))
        return T.mulc(T.mean(picked), -1.0)

    @staticmethod
    def predict(probs: np.ndarray) -> np.ndarray:
        # ties break toward the lowest label index
        return probs.argmax(axis=-1)


class MultiChoiceHead(nn.Module):
    """Linear score per choice, trained with pairwise hinge comparisons."""

    def __init__(self, rng, d: int, n_features: int = 1, batchnorm: bool = False):
        self.trunk = _JointEmbed(rng, d, n_features, with_answer=True,
                                 batchnorm=batchnorm)
        self.out = nn.Linear(rng, d, 1)

    def score(self, features_q: list[Tensor], features_a: list[Tensor],
              q: Tensor, a: Tensor, train: bool = False) -> Tensor:
        y = self.trunk(list(features_q) + list(features_a), q, a, train=train)
        return T.reshape(self.out(y), y.shape[:-1])

    @staticmethod
    def hinge_loss(scores: Tensor, correct: np.ndarray) -> Tensor:
        """Sum over (correct, incorrect) pairs of max(0, 1 + s_n - s_p), batch mean.

        ``scores`` has shape (batch, choices); ``correct`` marks one choice
        per row.
        """
        b, a = scores.shape
        correct = np.asarray(correct)
        if correct.shape != (b,):
            raise ValueError("one correct choice index required per row")
        mask = np.ones((b, a))
        mask[np.arange(b), correct] = 0.0
        flat = T.reshape(scores, (-1,))
        s_pos = T.take_rows(flat, np.arange(b) * a + correct)
        margins = T.relu(T.addc(scores - T.reshape(s_pos, (b, 1)), 1.0))
        return T.mean(T.summ(margins * Tensor(mask), axis=-1))


class CountHead(nn.Module):
    """Linear regression over the joint embedding; MSE on the raw output.

    Rounding (half away from zero) plus clamping to [0, 10] happens only at
    prediction time so training gradients stay well-defined.
    """

    def __init__(self, rng, d: int, n_features: int = 1, batchnorm: bool = False):
        self.trunk = _JointEmbed(rng, d, n_features, batchnorm=batchnorm)
        self.out = nn.Linear(rng, d, 1)

    def regress(self, features: list[Tensor], q: Tensor, train: bool = False) -> Tensor:
        y = self.trunk(features, q, train=train)
        return T.reshape(self.out(y), y.shape[:-1])

    def loss(self, features: list[Tensor], q: Tensor, targets: np.ndarray,
             train: bool = True) -> Tensor:
        diff = self.regress(features, q, train=train) \
            - Tensor(np.asarray(targets, dtype=float))
        return T.mean(diff * diff)

    @staticmethod
    def predict(raw: np.ndarray) -> np.ndarray:
        rounded = np.sign(raw) * np.floor(np.abs(raw) + 0.5)
        return np.clip(rounded, COUNT_MIN, COUNT_MAX).astype(int)

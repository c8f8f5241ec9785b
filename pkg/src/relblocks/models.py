"""Trainable task models: HCRN over symbol streams and LOGNet over scenes,
with optional grounding-prior regularization for the latter."""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .decoders import (AnswerSpace, CountHead, MultiChoiceHead, OpenEndedHead)
from .gapreg import (ChildSumTreeLSTM, EntityWordMapper, ParseTree,
                     combined_loss, kl_attention_loss, pool_priors)
from .hcrn import (ClipBatch, QueryEncoder, QueryEncoding,
                   QuestionDrivenReadout, VisualStream)
from .lognet import LOGNet, VisualObjects
from .tensor import Tensor


class HCRNModel(nn.Module):
    """Query encoder + visual stream + readout + task head."""

    def __init__(self, rng, vocab_size: int, d_in: int, answer_space: AnswerSpace,
                 d: int = 32, num_clips: int = 4, frames_per_clip: int = 6,
                 t: int = 2, grouping=None, motion: bool = True,
                 exhaustive: bool = False, head_batchnorm: bool = True,
                 embed_init: np.ndarray | None = None):
        self.answer_space = answer_space
        self.encoder = QueryEncoder(rng, vocab_size, d, init_rows=embed_init)
        self.stream = VisualStream(rng, d=d, num_clips=num_clips,
                                   frames_per_clip=frames_per_clip, d_in=d_in,
                                   t=t, grouping=grouping, motion=motion,
                                   exhaustive=exhaustive)
        kind = answer_space.kind
        if kind == "multi_choice":
            self.readout = QuestionDrivenReadout(rng, d, multi_choice=True)
            self.head = MultiChoiceHead(rng, d, batchnorm=head_batchnorm)
        elif kind == "count":
            self.readout = QuestionDrivenReadout(rng, d)
            self.head = CountHead(rng, d, batchnorm=head_batchnorm)
        else:
            self.readout = QuestionDrivenReadout(rng, d)
            self.head = OpenEndedHead(rng, d, n_answers=len(answer_space),
                                      batchnorm=head_batchnorm)

    def _encode_visual(self, batch: dict, rng):
        clip = ClipBatch(appearance=Tensor(batch["appearance"]),
                         motion=Tensor(batch["motion"]))
        enc = self.encoder(batch["question"])
        slots = self.stream.forward(clip, enc, rng)
        return slots, enc

    def _choice_scores(self, batch: dict, slots, enc) -> Tensor:
        b, n_choices, clen = batch["choices"].shape
        cand = self.encoder(batch["choices"].reshape(b * n_choices, clen))
        scores = []
        for i in range(n_choices):
            a_i = T.take_rows(cand.q, np.arange(b) * n_choices + i)
            o_i, _ = self.readout(slots, enc.q, a=a_i)
            scores.append(self.head.score([o_i], [], enc.q, a_i))
        return T.stack(scores, axis=1)

    def loss(self, batch: dict, rng, train: bool = True) -> Tensor:
        slots, enc = self._encode_visual(batch, rng)
        kind = self.answer_space.kind
        if kind == "multi_choice":
            return self.head.hinge_loss(self._choice_scores(batch, slots, enc),
                                        batch["label"])
        pooled, _ = self.readout(slots, enc.q)
        if kind == "count":
            return self.head.loss([pooled], enc.q, batch["label"])
        return self.head.loss([pooled], enc.q, batch["label"], train=train)

    def predict(self, batch: dict, rng) -> np.ndarray:
        slots, enc = self._encode_visual(batch, rng)
        kind = self.answer_space.kind
        if kind == "multi_choice":
            return self._choice_scores(batch, slots, enc).data.argmax(axis=1)
        pooled, _ = self.readout(slots, enc.q)
        if kind == "count":
            return self.head.predict(self.head.regress([pooled], enc.q).data)
        return self.head.predict(self.head([pooled], enc.q).data)


class LOGNetModel(nn.Module):
    """LOGNet over scene objects; linguistic objects are biLSTM words or, with
    ``use_tree``, the node vectors of a shared constituency tree.

    With positive regularization weights and grounding records in the batch,
    the training loss adds KL terms pulling the step-averaged attention toward
    the supplied priors. Evaluation never adds them.
    """

    def __init__(self, rng, vocab_size: int, d_appearance: int,
                 answer_space: AnswerSpace, d: int = 48, steps: int = 4,
                 gcn_layers: int = 2, heads: int = 2, rank: int | None = None,
                 use_tree: bool = False, lambda_ling: float = 0.0,
                 lambda_vis: float = 0.0):
        if answer_space.kind != "open_ended":
            raise ValueError("scene models decode open-ended answers")
        self.answer_space = answer_space
        self.encoder = QueryEncoder(rng, vocab_size, d)
        self.use_tree = use_tree
        self.tree_cell = ChildSumTreeLSTM(rng, d, d) if use_tree else None
        self.mapper = EntityWordMapper(rng, d) if use_tree else None
        self.core = LOGNet(rng, d=d, d_appearance=d_appearance, steps=steps,
                           gcn_layers=gcn_layers, heads=heads, rank=rank)
        self.head = OpenEndedHead(rng, d, n_answers=len(answer_space),
                                  batchnorm=True)
        self.lambda_ling = lambda_ling
        self.lambda_vis = lambda_vis

    def _shared_tree(self, batch: dict) -> ParseTree:
        trees = [g["tree"] for g in batch["grounding"]]
        first = trees[0]
        if any(t != first for t in trees[1:]):
            raise ValueError("batched tree encoding requires one shared topology")
        return ParseTree.from_json(first)

    def _encode(self, batch: dict):
        """Returns (enc for the core, word states, tree or None)."""
        words_enc = self.encoder(batch["question"])
        if not self.use_tree:
            return words_enc, words_enc.words, None
        tree = self._shared_tree(batch)
        hiddens, root = self.tree_cell.encode(tree, words_enc.words)
        enc = QueryEncoding(words=hiddens, q=root)
        return enc, words_enc.words, tree

    def _forward(self, batch: dict):
        obj = VisualObjects(appearance=Tensor(batch["appearance"]),
                            boxes=Tensor(batch["boxes"]))
        enc, word_states, tree = self._encode(batch)
        memory, traces = self.core.forward(obj, enc)
        return obj, enc, word_states, tree, memory, traces

    def _prior_arrays(self, batch: dict):
        gammas, betas = [], []
        for g in batch["grounding"]:
            pooled = pool_priors(np.array(g["word_scores"]),
                                 np.array(g["region_scores"]))
            gammas.append(pooled.gamma_star)
            betas.append(pooled.beta_star)
        return np.stack(gammas), np.stack(betas)

    def loss(self, batch: dict, rng=None, train: bool = True) -> Tensor:
        obj, enc, word_states, tree, memory, traces = self._forward(batch)
        vqa = self.head.loss([memory], enc.q, batch["label"], train=train)
        if not train or (self.lambda_ling == 0 and self.lambda_vis == 0) \
                or "grounding" not in batch:
            return vqa
        gamma_star, beta_star = self._prior_arrays(batch)
        entity_att, region_att = LOGNet.averaged_attention(traces)
        l_vis = kl_attention_loss(region_att, beta_star)
        l_ling = None
        if self.lambda_ling > 0:
            word_att = self._word_attention(entity_att, word_states, tree,
                                            obj, region_att)
            l_ling = kl_attention_loss(word_att, gamma_star)
        return combined_loss(vqa, l_ling, l_vis, self.lambda_ling, self.lambda_vis)

    def _word_attention(self, entity_att, word_states, tree, obj, region_att):
        """Map entity-level attention down to words when a tree is in play."""
        if tree is None:
            return entity_att
        v = self.core.fuse(obj)
        v_hat = T.summ(v * T.reshape(region_att, region_att.shape + (1,)), axis=-2)
        spans = [tree.leaf_span(i) for i in range(tree.num_nodes)]
        words = T.stack(word_states, axis=-2)
        return self.mapper(entity_att, spans, words, v_hat)

    def predict(self, batch: dict, rng=None) -> np.ndarray:
        _, enc, _, _, memory, _ = self._forward(batch)
        return self.head.predict(self.head([memory], enc.q).data)

    def region_attention_kl(self, batch: dict) -> float:
        """Mean KL(beta* || step-averaged region attention) over the batch."""
        _, _, _, _, _, traces = self._forward(batch)
        _, region_att = LOGNet.averaged_attention(traces)
        _, beta_star = self._prior_arrays(batch)
        return kl_attention_loss(region_att, beta_star).item()


def build_model(rng, task, model_cfg: dict):
    """Construct the model matching a synthetic task's kind and config."""
    from . import synthgen as sg

    arch = model_cfg.get("arch", "hcrn" if task.kind in sg.SEQUENCE_KINDS
                         else "lognet")
    if arch == "hcrn":
        feature_dim = task.config["feature_dim"]
        return HCRNModel(rng, vocab_size=len(task.vocab), d_in=feature_dim,
                         answer_space=task.answer_space,
                         d=model_cfg.get("d", 32),
                         num_clips=task.config["num_clips"],
                         frames_per_clip=task.config["frames_per_clip"],
                         t=model_cfg.get("t", 2),
                         grouping=model_cfg.get("grouping"),
                         motion=model_cfg.get("motion", True),
                         exhaustive=model_cfg.get("exhaustive", False))
    if arch == "lognet":
        return LOGNetModel(rng, vocab_size=len(task.vocab),
                           d_appearance=2 * task.config["attr_dim"],
                           answer_space=task.answer_space,
                           d=model_cfg.get("d", 48),
                           steps=model_cfg.get("steps", 4),
                           gcn_layers=model_cfg.get("gcn_layers", 2),
                           heads=model_cfg.get("heads", 2),
                           rank=model_cfg.get("rank"),
                           use_tree=model_cfg.get("use_tree", False),
                           lambda_ling=model_cfg.get("lambda_ling", 0.0),
                           lambda_vis=model_cfg.get("lambda_vis", 0.0))
    raise ValueError(f"unknown arch {arch!r}")

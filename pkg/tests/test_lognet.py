import numpy as np
import pytest

from relblocks import nn
from relblocks import tensor as T
from relblocks.decoders import OpenEndedHead
from relblocks.hcrn import QueryEncoding
from relblocks.lognet import LOGNet, LogStep, ReasoningState, VisualObjects
from relblocks.tensor import Tensor


def _boxes(rng, b, n):
    x1 = rng.uniform(0, 0.5, (b, n))
    y1 = rng.uniform(0, 0.5, (b, n))
    w = rng.uniform(0.05, 0.4, (b, n))
    h = rng.uniform(0.05, 0.4, (b, n))
    return Tensor(np.stack([x1, y1, x1 + w, y1 + h, w, h, w * h], axis=-1))


def _objects(rng, b, n, da):
    return VisualObjects(appearance=Tensor(rng.standard_normal((b, n, da))),
                         boxes=_boxes(rng, b, n))


def _enc(rng, b, s, d):
    return QueryEncoding(words=[Tensor(rng.standard_normal((b, d))) for _ in range(s)],
                         q=Tensor(rng.standard_normal((b, d))))


def _step(rng, d=4, heads=2, rank=2, layers=2):
    return LogStep(rng, d=d, heads=heads, rank=rank, gcn_layers=layers)


def _state(step, b, d):
    m0 = Tensor(np.zeros((b, d)))
    return ReasoningState(memory=m0, controls=None, step=0)


def test_visual_objects_validate_box_geometry():
    rng = np.random.default_rng(0)
    bad = _boxes(rng, 1, 3).data.copy()
    bad[..., 6] += 0.5
    with pytest.raises(ValueError):
        VisualObjects(appearance=Tensor(rng.standard_normal((1, 3, 4))),
                      boxes=Tensor(bad))


def test_augment_zero_memory_uses_content_half():
    rng = np.random.default_rng(1)
    step = _step(rng)
    v = Tensor(rng.standard_normal((1, 3, 4)))
    out = step.augment_nodes(v, Tensor(np.zeros((1, 4))))
    expected = np.concatenate([v.data, np.zeros_like(v.data)], -1) @ step.augment.w.data \
        + step.augment.b.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_augment_zero_nodes_leaves_bias():
    rng = np.random.default_rng(2)
    step = _step(rng)
    out = step.augment_nodes(Tensor(np.zeros((1, 3, 4))),
                             Tensor(rng.standard_normal((1, 4))))
    np.testing.assert_allclose(out.data, np.tile(step.augment.b.data, (1, 3, 1)))


def test_augment_scalar_hand_check():
    rng = np.random.default_rng(3)
    step = _step(rng, d=1, heads=1, rank=1, layers=1)
    step.augment.w.data[...] = np.array([[2.0], [3.0]])
    step.augment.b.data[...] = 0.5
    out = step.augment_nodes(Tensor([[[4.0]]]), Tensor([[5.0]]))
    # 2*4 + 3*(5*4) + 0.5
    np.testing.assert_allclose(out.data, [[[68.5]]])


def test_controller_single_word_attends_fully():
    rng = np.random.default_rng(4)
    step = _step(rng)
    w1 = rng.standard_normal((1, 4))
    controls, alpha = step.controller(Tensor(w1[:, None, :]),
                                      Tensor(rng.standard_normal((1, 4))), None)
    np.testing.assert_allclose(alpha.data, 1.0)
    for c in controls:
        np.testing.assert_allclose(c.data, w1, atol=1e-12)


def test_controller_identical_words_convexity():
    rng = np.random.default_rng(5)
    step = _step(rng)
    shared = rng.standard_normal((1, 1, 4))
    words = Tensor(np.tile(shared, (1, 5, 1)))
    controls, alpha = step.controller(words, Tensor(rng.standard_normal((1, 4))), None)
    np.testing.assert_allclose(alpha.data.sum(-1), 1.0, atol=1e-12)
    for c in controls:
        np.testing.assert_allclose(c.data, shared[:, 0], atol=1e-12)


def test_controller_heads_specialize_on_orthogonal_words():
    rng = np.random.default_rng(6)
    step = _step(rng, d=2, heads=2)
    # force q' = [1, 1]; head 0 scores dim 0, head 1 scores dim 1
    step.qc_proj.w.data[...] = 0.0
    step.qc_proj.b.data[...] = 1.0
    step.alpha_score[0].w.data[...] = np.array([[8.0], [0.0]])
    step.alpha_score[1].w.data[...] = np.array([[0.0], [8.0]])
    words = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    controls, alpha = step.controller(words, Tensor([[0.3, -0.4]]), None)
    assert alpha.data[0, 0, 0] > 0.99 and alpha.data[0, 1, 1] > 0.99
    np.testing.assert_allclose(controls[0].data, [[1.0, 0.0]], atol=1e-3)
    np.testing.assert_allclose(controls[1].data, [[0.0, 1.0]], atol=1e-3)


def test_controller_rejects_empty_word_set():
    rng = np.random.default_rng(7)
    step = _step(rng)
    with pytest.raises(T.ShapeMismatchError):
        step.controller(Tensor(np.zeros((1, 0, 4))), Tensor(np.zeros((1, 4))), None)


def test_adjacency_symmetric_psd_low_rank():
    rng = np.random.default_rng(8)
    step = _step(rng, d=8, rank=2)
    v = Tensor(rng.standard_normal((3, 6, 8)))
    controls = [Tensor(rng.standard_normal((3, 8))) for _ in range(2)]
    graph = step.build_adjacency(v, controls)
    a = graph.adjacency.data
    assert np.abs(a - np.swapaxes(a, -1, -2)).max() < 1e-12
    for i in range(a.shape[0]):
        eig = np.linalg.eigvalsh(a[i])
        assert eig.min() > -1e-9
        assert (eig > 1e-7).sum() <= 2


def test_adjacency_identical_description_columns():
    rng = np.random.default_rng(9)
    step = _step(rng, d=4, rank=2)
    # identical nodes produce identical description columns -> constant matrix
    v = Tensor(np.tile(rng.standard_normal((1, 1, 4)), (1, 5, 1)))
    controls = [Tensor(rng.standard_normal((1, 4)))]
    graph = step.build_adjacency(v, controls[:1] * step.heads)
    a = graph.adjacency.data[0]
    assert np.abs(a - a[0, 0]).max() < 1e-12


def test_binding_closed_gate_zeroes_linguistic_half():
    rng = np.random.default_rng(10)
    step = _step(rng, d=4)
    step.word_gate_out.w.data[...] = 0.0
    step.word_gate_out.b.data[...] = -80.0  # sigmoid -> ~0
    v = Tensor(rng.standard_normal((1, 3, 4)))
    words = Tensor(rng.standard_normal((1, 5, 4)))
    x, beta = step.language_binding(v, words, Tensor(np.zeros((1, 4))))
    assert np.abs(x.data[..., 4:]).max() < 1e-12
    assert np.abs(beta.data).max() < 1e-12


def test_binding_single_open_word_returned_everywhere():
    rng = np.random.default_rng(11)
    step = _step(rng, d=4)
    step.word_gate_out.w.data[...] = 0.0
    step.word_gate_out.b.data[...] = 80.0  # sigmoid -> ~1
    v = Tensor(rng.standard_normal((1, 3, 4)))
    w1 = rng.standard_normal((1, 1, 4))
    x, beta = step.language_binding(v, Tensor(w1), Tensor(np.zeros((1, 4))))
    np.testing.assert_allclose(beta.data, 1.0, atol=1e-12)
    for i in range(3):
        np.testing.assert_allclose(x.data[0, i, 4:], w1[0, 0], atol=1e-12)


def test_binding_permutation_equivariance():
    rng = np.random.default_rng(12)
    step = _step(rng, d=4)
    v = Tensor(rng.standard_normal((1, 5, 4)))
    words = Tensor(rng.standard_normal((1, 3, 4)))
    m = Tensor(rng.standard_normal((1, 4)))
    _, beta = step.language_binding(v, words, m)
    perm = np.array([3, 0, 4, 1, 2])
    _, beta_p = step.language_binding(Tensor(v.data[:, perm]), words, m)
    np.testing.assert_allclose(beta_p.data, beta.data[:, perm], atol=1e-12)


def test_refine_zero_residual_identity_on_nonnegative():
    rng = np.random.default_rng(13)
    step = _step(rng, d=3, layers=4)
    for lin in step.gcn_out:
        lin.w.data[...] = 0.0
    x = Tensor(np.abs(rng.standard_normal((1, 4, 6))))
    a = Tensor(np.eye(4)[None])
    out = step.refine(x, a)
    np.testing.assert_allclose(out.data, x.data, atol=1e-12)


def test_refine_zero_graph_reduces_to_bias_path():
    rng = np.random.default_rng(14)
    step = _step(rng, d=3, layers=1)
    x = Tensor(rng.standard_normal((1, 4, 6)))
    out = step.refine(x, Tensor(np.zeros((1, 4, 4))))
    b = step.gcn_in[0].b.data
    f = np.where(b > 0, b, np.expm1(b)) @ step.gcn_out[0].w.data
    pre = x.data + f
    np.testing.assert_allclose(out.data, np.where(pre > 0, pre, np.expm1(pre)),
                               atol=1e-12)


def test_refine_deep_stack_stays_finite():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        step = _step(rng, d=4, layers=16)
        x = Tensor(rng.standard_normal((2, 5, 8)))
        desc = T.softmax(Tensor(rng.standard_normal((2, 5, 2))), axis=-2)
        a = T.matmul(desc, T.transpose_last2(desc))
        out = step.refine(x, a)
        assert np.abs(out.data).max() < 1e6


def test_readout_single_node_is_identity():
    rng = np.random.default_rng(15)
    step = _step(rng, d=3)
    r = Tensor(rng.standard_normal((1, 1, 6)))
    summary, _, delta = step.readout_update(r, Tensor(np.zeros((1, 3))))
    np.testing.assert_allclose(summary.data, r.data[:, 0], atol=1e-12)
    np.testing.assert_allclose(delta.data, 1.0)


def test_readout_identical_nodes():
    rng = np.random.default_rng(16)
    step = _step(rng, d=3)
    shared = rng.standard_normal((1, 1, 6))
    r = Tensor(np.tile(shared, (1, 4, 1)))
    summary, _, delta = step.readout_update(r, Tensor(np.zeros((1, 3))))
    np.testing.assert_allclose(summary.data, shared[:, 0], atol=1e-12)
    np.testing.assert_allclose(delta.data.sum(-1), 1.0, atol=1e-12)


def test_readout_delta_sums_to_one_randomized():
    rng = np.random.default_rng(17)
    step = _step(rng, d=4)
    for _ in range(50):
        r = Tensor(rng.standard_normal((2, 6, 8)) * 3)
        _, _, delta = step.readout_update(r, Tensor(rng.standard_normal((2, 4))))
        np.testing.assert_allclose(delta.data.sum(-1), 1.0, atol=1e-9)


def test_single_step_forward_equals_manual_composition():
    rng = np.random.default_rng(18)
    d = 4
    model = LOGNet(rng, d=d, d_appearance=5, steps=1, gcn_layers=2, heads=2)
    obj = _objects(np.random.default_rng(1), 1, 4, 5)
    enc = _enc(np.random.default_rng(2), 1, 3, d)
    memory, traces = model.forward(obj, enc)

    step = model.steps[0]
    v = model.fuse(obj)
    words = T.stack(enc.words, axis=-2)
    m0 = T.broadcast_to(T.reshape(model.memory_init, (1, d)), (1, d))
    v_t = step.augment_nodes(v, m0)
    controls, alpha = step.controller(words, enc.q, None)
    graph = step.build_adjacency(v_t, controls)
    x, beta = step.language_binding(v_t, words, m0)
    refined = step.refine(x, graph.adjacency)
    _, memory2, delta = step.readout_update(refined, m0)

    np.testing.assert_allclose(memory.data, memory2.data, atol=1e-12)
    np.testing.assert_allclose(traces[0].node_attention.data, delta.data, atol=1e-12)
    np.testing.assert_allclose(traces[0].binding.data, beta.data, atol=1e-12)


def test_per_step_graphs_differ():
    rng = np.random.default_rng(19)
    model = LOGNet(rng, d=4, d_appearance=5, steps=2, gcn_layers=1, heads=2)
    _, traces = model.forward(_objects(np.random.default_rng(3), 1, 5, 5),
                              _enc(np.random.default_rng(4), 1, 4, 4))
    diff = np.linalg.norm(traces[0].adjacency.data - traces[1].adjacency.data)
    assert diff > 0


def test_full_model_permutation_invariance_of_answer():
    rng = np.random.default_rng(20)
    d = 4
    model = LOGNet(rng, d=d, d_appearance=5, steps=2, gcn_layers=2, heads=2)
    head = OpenEndedHead(rng, d=d, n_answers=4)
    obj = _objects(np.random.default_rng(5), 1, 5, 5)
    enc = _enc(np.random.default_rng(6), 1, 3, d)

    def run(o):
        m, traces = model.forward(o, enc)
        return head([m], enc.q).data, traces

    probs, traces = run(obj)
    perm = np.array([4, 2, 0, 3, 1])
    obj_p = VisualObjects(appearance=Tensor(obj.appearance.data[:, perm]),
                          boxes=Tensor(obj.boxes.data[:, perm]))
    probs_p, traces_p = run(obj_p)
    np.testing.assert_allclose(probs_p, probs, atol=1e-6)
    for tr, tr_p in zip(traces, traces_p):
        np.testing.assert_allclose(tr_p.node_attention.data,
                                   tr.node_attention.data[:, perm], atol=1e-9)
        np.testing.assert_allclose(tr_p.binding.data,
                                   tr.binding.data[:, perm], atol=1e-9)


def test_full_model_gradients():
    rng = np.random.default_rng(21)
    d = 4
    model = LOGNet(rng, d=d, d_appearance=3, steps=2, gcn_layers=1, heads=2)
    head = OpenEndedHead(rng, d=d, n_answers=3)
    obj = _objects(np.random.default_rng(7), 1, 3, 3)
    enc = _enc(np.random.default_rng(8), 1, 3, d)

    def forward():
        m, _ = model.forward(obj, enc)
        return head.loss([m], enc.q, labels=np.array([1]), train=False)

    params = model.parameters() + head.parameters()
    assert nn.model_grad_check(forward, params) < 1e-4


def test_attention_rows_are_distributions():
    rng = np.random.default_rng(22)
    model = LOGNet(rng, d=4, d_appearance=5, steps=3, gcn_layers=1, heads=2)
    _, traces = model.forward(_objects(np.random.default_rng(9), 2, 6, 5),
                              _enc(np.random.default_rng(10), 2, 4, 4))
    for tr in traces:
        np.testing.assert_allclose(tr.word_attention.data.sum(-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(tr.node_attention.data.sum(-1), 1.0, atol=1e-9)
        assert tr.word_attention.data.min() >= 0
        assert tr.node_attention.data.min() >= 0


def test_averaged_attention_is_normalized():
    rng = np.random.default_rng(23)
    model = LOGNet(rng, d=4, d_appearance=5, steps=3, gcn_layers=1, heads=2)
    _, traces = model.forward(_objects(np.random.default_rng(11), 2, 5, 5),
                              _enc(np.random.default_rng(12), 2, 4, 4))
    word, region = LOGNet.averaged_attention(traces)
    np.testing.assert_allclose(word.data.sum(-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(region.data.sum(-1), 1.0, atol=1e-9)

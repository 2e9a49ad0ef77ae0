import math

import numpy as np
import pytest
from scipy.special import erf, softmax as sp_softmax

from vcil import numerics as nx
from vcil.backbone import BlockConfig
from vcil.expansion import (Adapter, CrossTaskAttention, ExpandableModel, adapt_msa, analytic_trainable_count,
                            cross_task_attend, distill_loss, model_distill_loss)
from vcil.numerics import Tensor

from oracle import SMALL, TINY, model_grad_check, randomize, tiny_model


def _adapter(rng, d, b, zero_up=False):
    return Adapter(Tensor(rng.normal(size=(d, b))), Tensor(np.zeros((b, d)) if zero_up else rng.normal(size=(b, d))))


def test_adapt_msa_identities():
    rng = np.random.default_rng(0)
    f0 = Tensor(rng.normal(size=(3, 5, 4)))
    assert adapt_msa(f0, []) is f0
    out = adapt_msa(f0, [_adapter(rng, 4, 1, zero_up=True), _adapter(rng, 4, 1, zero_up=True)])
    assert np.array_equal(out.data, f0.data)
    with pytest.raises(ValueError):
        adapt_msa(f0, [], n=1)
    with pytest.raises(nx.ShapeError):
        adapt_msa(f0, [_adapter(rng, 3, 1)])


def test_adapt_msa_scalar_oracle():
    f0 = np.array([[0.5, -1.0]])
    w1 = np.array([[0.3], [0.7]])
    w2 = np.array([[1.5, -2.0]])
    h = (f0 @ w1)[0, 0]
    g = 0.5 * h * (1 + erf(h / math.sqrt(2)))
    out = adapt_msa(Tensor(f0), [Adapter(Tensor(w1), Tensor(w2))], n=1).data
    assert np.allclose(out, f0 + g * w2[0], atol=1e-15)


def test_adapt_msa_additive_over_disjoint_sets():
    rng = np.random.default_rng(1)
    f0 = Tensor(rng.normal(size=(2, 4)))
    A = [_adapter(rng, 4, 2) for _ in range(2)]
    B = [_adapter(rng, 4, 2)]
    lhs = adapt_msa(f0, A + B).data
    rhs = adapt_msa(f0, A).data + adapt_msa(f0, B).data - f0.data
    assert np.allclose(lhs, rhs, atol=1e-12)


def _cta(wq, wk, wv, scale=1.0, gate=1.0):
    return CrossTaskAttention(Tensor(wq), Tensor(wk), Tensor(wv), Tensor([gate]), scale)


def test_cross_task_single_key_identity():
    fn = Tensor(np.array([[[0.3, -0.2, 1.0]]]))
    cta = _cta(np.eye(3), np.eye(3), np.eye(3))
    assert np.allclose(cta.attend(fn, [fn]).data, fn.data)


def test_cross_task_duplicate_snapshots():
    rng = np.random.default_rng(2)
    fn = Tensor(rng.normal(size=(1, 4, 3)))
    snap = Tensor(rng.normal(size=(1, 4, 3)))
    cta = _cta(*(rng.normal(size=(3, 3)) for _ in range(3)))
    assert np.allclose(cta.attend(fn, [snap]).data, cta.attend(fn, [snap, snap]).data, atol=1e-12)


def test_cross_task_two_token_hand_mixture():
    fn = np.array([[1.0, 0.0]])
    s1, s2 = np.array([[0.0, 1.0]]), np.array([[2.0, 0.0]])
    wq = np.array([[1.0, 0.5], [0.0, 1.0]])
    wk = np.array([[1.0, 0.0], [1.0, 1.0]])
    wv = np.array([[0.5, 0.0], [0.0, 2.0]])
    sigma = math.sqrt(2.0)
    q = fn @ wq
    k = np.vstack([s1, s2]) @ wk
    v = np.vstack([s1, s2]) @ wv
    w = sp_softmax(q @ k.T / sigma, axis=-1)
    got = _cta(wq, wk, wv, sigma).attend(Tensor(fn), [Tensor(s1), Tensor(s2)]).data
    assert np.allclose(got, w @ v, atol=1e-14)


def test_cross_task_snapshot_order_invariant():
    rng = np.random.default_rng(3)
    fn = Tensor(rng.normal(size=(2, 3, 4)))
    snaps = [Tensor(rng.normal(size=(2, 3, 4))) for _ in range(3)]
    cta = _cta(*(rng.normal(size=(4, 4)) for _ in range(3)))
    a = cta.attend(fn, snaps).data
    b = cta.attend(fn, snaps[::-1]).data
    assert np.allclose(a, b, atol=1e-12)


def test_cross_task_rows_sum_to_one_and_errors():
    rng = np.random.default_rng(4)
    fn = Tensor(rng.normal(size=(1, 3, 4)))
    cta = _cta(*(rng.normal(size=(4, 4)) for _ in range(3)))
    rec = []
    cta.attend(fn, [Tensor(rng.normal(size=(1, 3, 4)))] * 2, rec)
    assert np.allclose(rec[0].sum(-1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        cta.attend(fn, [])
    assert cross_task_attend(fn, [], None) is fn


def test_zero_expansion_identity_bitwise():
    m = ExpandableModel(TINY, seed=0)
    m.expand_for_task(0, 3)
    randomize(m, np.random.default_rng(0))
    clips = np.random.default_rng(1).random((5, 2, 4, 4))
    with nx.no_grad():
        before = m.forward(clips)
    for t in (1, 2):
        m.expand_for_task(t, 2)
        with nx.no_grad():
            after = m.forward(clips)
        for a, b in ((before.F, after.F), (before.S, after.S), (before.T, after.T),
                     (before.logits[0], after.logits[0])):
            assert np.array_equal(a.data, b.data)


def test_expand_trainable_set_and_errors():
    m = tiny_model(tasks=1)
    names = m.expand_for_task(1, 3)
    assert all(n.startswith(("adapters.1.", "heads.1.", "cross.")) for n in names)
    assert set(names) == set(m.manifests[1].added)
    assert sum(p.requires_grad for p in m.params.values()) == len(names)
    with pytest.raises(ValueError, match="already"):
        m.expand_for_task(1, 3)
    with pytest.raises(ValueError):
        m.expand_for_task(3, 3)


def test_cross_attention_retrained_and_checkpointed():
    m = tiny_model(tasks=2)
    m.params["cross.spatial.gate"].data[...] = 0.5
    names = m.expand_for_task(2, 3)
    assert "cross.spatial.gate" in names
    assert m.cross_history[1]["cross.spatial.gate"].tolist() == [0.5]


def test_embedding_axis_projections_grow():
    m = tiny_model(tasks=3, concat_axis="embedding")
    assert m.params["cross.1.temporal.k"].shape == (4, 4)
    assert m.params["cross.2.temporal.k"].shape == (8, 4)
    clips = np.random.default_rng(0).random((2, 2, 4, 4))
    assert m.forward(clips).logits[2].shape == (2, 3)


@pytest.mark.parametrize("mode", ["sep_ada", "mlp_adapter", "finetune"])
@pytest.mark.parametrize("axis", ["token", "embedding"])
def test_trainable_count_matches_analytic(mode, axis):
    m = ExpandableModel(SMALL, seed=0, mode=mode, concat_axis=axis)
    for t in range(4):
        names = m.expand_for_task(t, 3)
        assert m.count(names) == analytic_trainable_count(SMALL, 3, t, mode, True, axis)
        if t:
            assert m.count(names) < m.manifests[0].trainable_count


def test_default_config_ratio_below_one():
    c = BlockConfig()
    r = analytic_trainable_count(c, 4, 1) / analytic_trainable_count(c, 4, 0)
    assert 0 < r < 1


def test_one_step_leaves_frozen_bitwise():
    m = tiny_model(tasks=2)
    frozen = {n: p.data.copy() for n, p in m.params.items() if not p.requires_grad}
    clips = np.random.default_rng(0).random((3, 2, 4, 4))
    loss = nx.cross_entropy(m.forward(clips).all_logits(), [0, 3, 5])
    nx.backward(loss)
    for n in m.trainable_names():
        m.params[n].data -= 0.1 * m.params[n].grad
    for n, v in frozen.items():
        assert np.array_equal(m.params[n].data, v), n


def test_distill_zero_at_init_and_kl_oracle():
    m = tiny_model(tasks=2)
    clips = np.random.default_rng(0).random((4, 2, 4, 4))
    assert model_distill_loss(m, clips).item() == 0.0
    p, q = np.log([[0.7, 0.3]]), np.log([[0.4, 0.6]])
    ref = 0.7 * math.log(0.7 / 0.4) + 0.3 * math.log(0.3 / 0.6)
    assert distill_loss(Tensor(q), Tensor(p)).item() == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        model_distill_loss(tiny_model(tasks=1), clips)


def test_distill_gradient_matches_fd():
    m = tiny_model(tasks=2)
    randomize(m, np.random.default_rng(5))
    clips = np.random.default_rng(6).random((2, 2, 4, 4))
    # the non-adapted target is a constant of the loss, so the oracle holds it fixed too
    with nx.no_grad():
        plain = m.forward(clips, skip=m.skip_current())
    assert model_grad_check(m, lambda: model_distill_loss(m, clips, plain=plain)) < 1e-3


def test_forward_unknown_task_rejected():
    m = tiny_model(tasks=1)
    with pytest.raises(IndexError):
        m.forward(np.zeros((1, 2, 4, 4)), task=3)

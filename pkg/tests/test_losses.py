"""Unit tests for the five objectives and the transport machinery."""

import numpy as np
import pytest

from xmzsr import losses, numcore as nc
from xmzsr.errors import ConfigError, ContractError, DataError, NumericError, ScopeError
from xmzsr.losses import LossWeights, TransportPlan
from xmzsr.numcore import Tensor, grad_check


def rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


# ---------------------------------------------------------------------------
# distances


def test_pairwise_distances_match_direct():
    a, b = rand((4, 3), 1), rand((5, 3), 2)
    got = losses.pairwise_distances(Tensor(a), Tensor(b)).data
    expect = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_row_distances_match_direct():
    a, b = rand((6, 4), 3), rand((6, 4), 4)
    got = losses.row_distances(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, np.linalg.norm(a - b, axis=1), atol=1e-12)


def test_pairwise_distance_gradients():
    a0, b0 = rand((3, 2), 5), rand((4, 2), 6)
    err = grad_check(
        lambda x: nc.tsum(losses.pairwise_distances(x, Tensor(b0))),
        Tensor(a0, requires_grad=True),
    )
    assert err < 1e-6


# ---------------------------------------------------------------------------
# exact transport oracle


def test_exact_oracle_hand_instance():
    # two points each; identity matching is optimal
    src = np.array([[0.0, 0.0], [10.0, 0.0]])
    tgt = np.array([[0.0, 1.0], [10.0, 1.0]])
    res = losses.exact_ot_oracle(src, tgt)
    np.testing.assert_allclose(res.cost, 1.0)
    np.testing.assert_allclose(res.plan, np.eye(2) / 2)


def test_exact_oracle_crossing_instance():
    src = np.array([[0.0, 0.0], [1.0, 0.0]])
    tgt = np.array([[1.1, 0.0], [0.1, 0.0]])
    res = losses.exact_ot_oracle(src, tgt)
    # swapping beats identity: (0.1 + 0.1)/2 vs (1.1 + 0.9)/2
    np.testing.assert_allclose(res.cost, 0.1)
    np.testing.assert_allclose(res.plan, np.array([[0.0, 0.5], [0.5, 0.0]]))


def test_exact_oracle_scope():
    with pytest.raises(ScopeError):
        losses.exact_ot_oracle(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ScopeError):
        losses.exact_ot_oracle(np.zeros((9, 2)), np.zeros((9, 2)))


# ---------------------------------------------------------------------------
# Sinkhorn


def test_sinkhorn_single_point_is_exact_distance():
    a = Tensor(np.array([[0.0, 0.0]]))
    b = Tensor(np.array([[3.0, 4.0]]))
    got = losses.wasserstein_sinkhorn(a, b, 0.05, 50).item()
    np.testing.assert_allclose(got, 5.0, atol=1e-12)


def test_sinkhorn_self_transport_near_zero():
    pts = rand((5, 4), 7)
    got = losses.wasserstein_sinkhorn(Tensor(pts), Tensor(pts.copy()), 0.05, 200).item()
    assert 0.0 <= got < 1e-6


def test_sinkhorn_symmetric_at_convergence():
    for seed in range(5):
        a, b = rand((4, 5), 10 + seed), rand((4, 5), 50 + seed)
        w_ab = losses.wasserstein_sinkhorn(Tensor(a), Tensor(b), 0.5, 300).item()
        w_ba = losses.wasserstein_sinkhorn(Tensor(b), Tensor(a), 0.5, 300).item()
        assert abs(w_ab - w_ba) <= 1e-9


def test_sinkhorn_never_undercuts_exact():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 6))
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        sk = losses.wasserstein_sinkhorn(Tensor(a), Tensor(b), 0.01, 200).item()
        ex = losses.exact_ot_oracle(a, b).cost
        assert sk >= ex - 1e-9


def test_sinkhorn_plan_marginals():
    a, b = rand((5, 3), 20), rand((7, 3), 21)
    plan = losses.sinkhorn_plan(a, b, 0.1, 500)
    np.testing.assert_allclose(plan.sum(axis=1), np.full(5, 1 / 5), atol=1e-6)
    np.testing.assert_allclose(plan.sum(axis=0), np.full(7, 1 / 7), atol=1e-6)
    assert np.all(plan >= 0)


def test_sinkhorn_unequal_sizes_supported():
    a, b = rand((3, 2), 22), rand((6, 2), 23)
    w = losses.wasserstein_sinkhorn(Tensor(a), Tensor(b), 0.1, 200).item()
    assert np.isfinite(w) and w > 0


def test_sinkhorn_parameter_validation():
    a = Tensor(rand((2, 2), 0))
    with pytest.raises(ConfigError):
        losses.wasserstein_sinkhorn(a, a, epsilon=0.0)
    with pytest.raises(ConfigError):
        losses.wasserstein_sinkhorn(a, a, iters=0)
    with pytest.raises(ConfigError):
        losses.sinkhorn_plan(a.data, a.data, 0.1, 0)


def test_sinkhorn_gradients():
    for seed in range(3):
        a0, b0 = rand((3, 3), 30 + seed), rand((3, 3), 60 + seed)
        err = grad_check(
            lambda x: losses.wasserstein_sinkhorn(x, Tensor(b0), 0.05, 60),
            Tensor(a0, requires_grad=True),
        )
        assert err < 1e-3, seed


# ---------------------------------------------------------------------------
# compatibility


def test_compatibility_loss_values_and_bounds():
    d_pos = Tensor(np.array([0.0, 1.0]))
    d_neg = Tensor(np.array([0.0, 1.0]))
    np.testing.assert_allclose(
        losses.compatibility_loss(d_pos, d_neg).item(), 0.5, atol=1e-12
    )
    # positive much closer than negative drives the loss toward 0
    low = losses.compatibility_loss(Tensor(np.array([0.1])), Tensor(np.array([9.0]))).item()
    assert low < 1e-3
    high = losses.compatibility_loss(Tensor(np.array([9.0])), Tensor(np.array([0.1]))).item()
    assert high > 1 - 1e-3


def test_compatibility_matches_naive_formula():
    dp, dn = np.abs(rand((6,), 40)), np.abs(rand((6,), 41))
    got = losses.compatibility_loss(Tensor(dp), Tensor(dn)).item()
    expect = np.mean(np.exp(dp) / (np.exp(dp) + np.exp(dn)))
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_compatibility_stable_at_large_distances():
    got = losses.compatibility_loss(
        Tensor(np.array([800.0])), Tensor(np.array([700.0]))
    ).item()
    assert np.isfinite(got) and abs(got - 1.0) < 1e-12


def test_compatibility_shape_check():
    with pytest.raises(ContractError):
        losses.compatibility_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_compatibility_allclass_matches_direct():
    dp = np.abs(rand((4,), 42))
    dall = np.abs(rand((4, 5), 43))
    got = losses.compatibility_loss_allclass(Tensor(dp), Tensor(dall)).item()
    expect = np.mean(np.exp(dp) / np.exp(dall).sum(axis=1))
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_compatibility_gradients():
    dp0, dn0 = np.abs(rand((5,), 44)), np.abs(rand((5,), 45))
    err = grad_check(
        lambda x: losses.compatibility_loss(x, Tensor(dn0)),
        Tensor(dp0, requires_grad=True),
    )
    assert err < 1e-7


# ---------------------------------------------------------------------------
# domain


def test_domain_loss_matches_bce_by_hand():
    s = rand((3,), 50)
    p = rand((2,), 51)
    t = 0.8
    got = losses.domain_loss(Tensor(s), Tensor(p), t).item()

    def bce(z, q):
        return np.logaddexp(0.0, z) - q * z

    expect = (bce(s, 1 - t).sum() + bce(p, t).sum()) / 5
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_domain_loss_minimized_at_matching_logits():
    # with target q, BCE is minimized at z = logit(q)
    t = 0.7
    z_s = np.log((1 - t) / t)
    z_p = np.log(t / (1 - t))
    best = losses.domain_loss(Tensor(np.array([z_s])), Tensor(np.array([z_p])), t).item()
    worse = losses.domain_loss(
        Tensor(np.array([z_s + 1.0])), Tensor(np.array([z_p])), t
    ).item()
    assert best < worse


def test_domain_loss_t_validation():
    z = Tensor(np.zeros(2))
    for bad in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(ConfigError):
            losses.domain_loss(z, z, bad)


def test_domain_loss_gradients():
    s0, p0 = rand((4,), 52), rand((4,), 53)
    err = grad_check(
        lambda x: losses.domain_loss(x, Tensor(p0), 0.8), Tensor(s0, requires_grad=True)
    )
    assert err < 1e-7


# ---------------------------------------------------------------------------
# classification


def softmax_np(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_classification_loss_matches_nll_by_hand():
    rng = np.random.default_rng(60)
    s, p, n = rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    al = np.array([1, 3])
    nl = np.array([0, 2])
    got = losses.classification_loss(Tensor(s), Tensor(p), Tensor(n), al, nl).item()

    def nll(z, y):
        return -np.log(softmax_np(z)[np.arange(len(y)), y]).sum()

    expect = (nll(s, al) + nll(p, al) + nll(n, nl)) / 6
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_classification_label_range_check():
    z = Tensor(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        losses.classification_loss(z, z, z, np.array([0, 3]), np.array([0, 0]))
    with pytest.raises(ContractError):
        losses.classification_loss(z, z, z, np.array([0]), np.array([0, 0]))


def test_classification_gradients():
    rng = np.random.default_rng(61)
    p0, n0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    al, nl = np.array([0, 1, 2]), np.array([3, 0, 1])
    err = grad_check(
        lambda x: losses.classification_loss(x, Tensor(p0), Tensor(n0), al, nl),
        Tensor(rng.normal(size=(3, 4)), requires_grad=True),
    )
    assert err < 1e-6


# ---------------------------------------------------------------------------
# semantic


def test_semantic_loss_aligned_and_opposed():
    t = rand((3, 6), 70)
    same = losses.semantic_loss(Tensor(2.0 * t), Tensor(t)).item()
    np.testing.assert_allclose(same, 0.0, atol=1e-12)
    opposed = losses.semantic_loss(Tensor(-t), Tensor(t)).item()
    np.testing.assert_allclose(opposed, 2.0, atol=1e-12)


def test_semantic_loss_zero_decoded_contributes_one_without_grad():
    t = np.abs(rand((2, 4), 71)) + 0.1
    decoded = Tensor(np.zeros((2, 4)), requires_grad=True)
    out = losses.semantic_loss(decoded, Tensor(t))
    np.testing.assert_allclose(out.item(), 1.0, atol=1e-12)
    nc.backward(out)
    np.testing.assert_allclose(decoded.grad, np.zeros((2, 4)))


def test_semantic_loss_zero_target_rejected():
    with pytest.raises(DataError):
        losses.semantic_loss(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 3))))
    with pytest.raises(ContractError):
        losses.semantic_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 3))))


def test_semantic_loss_gradients():
    d0 = rand((3, 5), 72)
    t0 = rand((3, 5), 73)
    err = grad_check(
        lambda x: losses.semantic_loss(x, Tensor(t0)), Tensor(d0, requires_grad=True)
    )
    assert err < 1e-6


# ---------------------------------------------------------------------------
# combination


def test_total_loss_weighted_sum_and_report():
    terms = [Tensor(np.array(v)) for v in (2.0, 1.0, 0.5, 0.25, 4.0)]
    w = LossWeights(lambda1=0.1, lambda2=0.2, lambda3=0.3, lambda4=0.4)
    total, report = losses.total_loss(*terms, w)
    expect = 2.0 + 0.1 * 1.0 + 0.2 * 0.5 + 0.3 * 0.25 + 0.4 * 4.0
    np.testing.assert_allclose(total.item(), expect, atol=1e-12)
    assert report.wasserstein == 2.0 and report.semantic == 4.0
    np.testing.assert_allclose(report.total, expect, atol=1e-12)
    assert set(report.as_dict()) == {
        "wasserstein",
        "compatibility",
        "domain",
        "classification",
        "semantic",
        "total",
    }


def test_total_loss_rejects_nonfinite_and_bad_weights():
    good = Tensor(np.array(1.0))
    bad = Tensor.__new__(Tensor)
    bad.data = np.array(np.inf)
    bad.requires_grad = False
    bad.grad = None
    bad._parents = ()
    bad._backward = None
    with pytest.raises(NumericError):
        losses.total_loss(bad, good, good, good, good, LossWeights())
    with pytest.raises(ConfigError):
        losses.total_loss(good, good, good, good, good, LossWeights(lambda1=-1.0))
    with pytest.raises(ConfigError):
        LossWeights(t=1.0).validate()

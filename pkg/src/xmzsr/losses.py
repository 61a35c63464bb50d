"""The five learning objectives and their weighted combination.

The transport term runs log-domain Sinkhorn scaling unrolled through the
tape, so its gradient is the gradient of the finite-iteration computation
(not an envelope approximation). An exact permutation brute-force oracle
is provided for testing it on small instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, DataError, NumericError, ScopeError
from .numcore import Tensor


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray  # (n, m), nonnegative, marginals = uniform weights
    cost: float


@dataclass(frozen=True)
class LossWeights:
    """lambda1..4 weight compatibility/domain/classification/semantic terms;
    the transport term enters with implicit weight 1. `t` sets the soft
    domain targets (sketch -> 1-t, photo -> t)."""

    lambda1: float = 0.25
    lambda2: float = 0.25
    lambda3: float = 0.25
    lambda4: float = 0.25

    t: float = 0.8

    def validate(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not 0.0 < self.t < 1.0:
            raise ConfigError(f"domain target t must lie in (0, 1), got {self.t}")


@dataclass(frozen=True)
class LossReport:
    wasserstein: float
    compatibility: float
    domain: float
    classification: float
    semantic: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "wasserstein": self.wasserstein,
            "compatibility": self.compatibility,
            "domain": self.domain,
            "classification": self.classification,
            "semantic": self.semantic,
            "total": self.total,
        }


def pairwise_distances(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance matrix between row sets, (n, m), differentiable."""
    cross = nc.matmul(a, nc.transpose(b))  # (n, m)
    a2 = nc.tsum(nc.mul(a, a), axis=1)  # (n,)
    b2 = nc.tsum(nc.mul(b, b), axis=1)  # (m,)
    sq = nc.add(nc.mul(cross, Tensor(-2.0)), b2)  # + row vector (m,)
    sq = nc.transpose(nc.add(nc.transpose(sq), a2))
    # tiny negatives from cancellation are clipped before the root
    return nc.sqrt(nc.relu(sq))


def row_distances(a: Tensor, b: Tensor) -> Tensor:
    """Per-row Euclidean distance between paired rows, (n,)."""
    d = nc.sub(a, b)
    return nc.sqrt(nc.relu(nc.tsum(nc.mul(d, d), axis=1)))


def wasserstein_sinkhorn(
    source: Tensor, target: Tensor, epsilon: float = 0.05, iters: int = 100
) -> Tensor:
    """Entropic-regularized transport cost between uniform empirical clouds.

    Cost is the Euclidean distance matrix; the plan comes from `iters`
    log-domain scaling iterations and the returned scalar is <plan, cost>.
    The regularizer is annealed geometrically from the cost scale down to
    `epsilon` over the first two thirds of the budget, which keeps small
    target epsilons usable at modest iteration counts. The final plan is
    projected onto the transport polytope before taking the inner product,
    so the reported cost is always attained by a feasible plan.
    """
    if epsilon <= 0:
        raise ConfigError(f"sinkhorn epsilon must be positive, got {epsilon}")
    if iters < 1:
        raise ConfigError(f"sinkhorn iters must be >= 1, got {iters}")
    n, m = source.data.shape[0], target.data.shape[0]
    cost = pairwise_distances(source, target)  # (n, m)
    if not np.all(np.isfinite(cost.data)):
        raise NumericError("sinkhorn: non-finite cost matrix")
    cost_t = nc.transpose(cost)  # (m, n)
    log_a = float(-np.log(n))
    log_b = float(-np.log(m))
    eps_start = max(float(cost.data.max()), epsilon)
    k_anneal = max(1, (2 * iters) // 3)
    decay = (epsilon / eps_start) ** (1.0 / k_anneal)
    f = Tensor(np.zeros(n))  # potentials in cost units
    g = Tensor(np.zeros(m))
    for k in range(iters):
        eps_k = max(epsilon, eps_start * decay**k)
        inv = Tensor(1.0 / eps_k)
        g = nc.mul(
            nc.sub(Tensor(log_b), nc.lse_rows_plus(nc.mul(cost_t, nc.neg(inv)), nc.mul(f, inv))),
            Tensor(eps_k),
        )
        f = nc.mul(
            nc.sub(Tensor(log_a), nc.lse_rows_plus(nc.mul(cost, nc.neg(inv)), nc.mul(g, inv))),
            Tensor(eps_k),
        )
    shifted = nc.transpose(nc.add(nc.transpose(nc.add(nc.neg(cost), g)), f))
    log_plan = nc.mul(shifted, Tensor(1.0 / epsilon))
    plan = _round_to_polytope(nc.exp(log_plan), 1.0 / n, 1.0 / m)
    return nc.tsum(nc.mul(plan, cost))


def _min1(x: Tensor) -> Tensor:
    # min(x, 1) written with existing primitives
    return nc.sub(Tensor(1.0), nc.relu(nc.sub(Tensor(1.0), x)))


def _round_to_polytope(plan: Tensor, a: float, b: float) -> Tensor:
    """Project a near-feasible plan onto the uniform transport polytope.

    Rows and columns are rescaled down to their target marginals, then the
    residual mass is restored by a rank-one correction. The result is
    exactly feasible, so its cost can never undercut the true optimum at
    finite iteration counts.
    """
    n, m = plan.data.shape
    row_scale = _min1(nc.div(Tensor(a), nc.tsum(plan, axis=1)))
    p1 = nc.scale_rows(plan, row_scale)
    col_scale = _min1(nc.div(Tensor(b), nc.tsum(p1, axis=0)))
    p2 = nc.transpose(nc.scale_rows(nc.transpose(p1), col_scale))
    err_a = nc.sub(Tensor(np.full(n, a)), nc.tsum(p2, axis=1))
    err_b = nc.sub(Tensor(np.full(m, b)), nc.tsum(p2, axis=0))
    # The floor keeps the div backward finite when the plan is already
    # feasible (residual mass ~1e-16); the marginal error it leaves behind
    # is bounded by the residual itself.
    mass = nc.clamp_min(nc.tsum(err_a), 1e-12)
    correction = nc.div(
        nc.matmul(nc.reshape(err_a, (n, 1)), nc.reshape(err_b, (1, m))), mass
    )
    return nc.add(p2, correction)


def sinkhorn_plan(
    source: np.ndarray, target: np.ndarray, epsilon: float, iters: int
) -> np.ndarray:
    """Forward-only transport plan (for marginal diagnostics)."""
    src = Tensor(np.asarray(source, dtype=np.float64))
    tgt = Tensor(np.asarray(target, dtype=np.float64))
    if epsilon <= 0:
        raise ConfigError(f"sinkhorn epsilon must be positive, got {epsilon}")
    if iters < 1:
        raise ConfigError(f"sinkhorn iters must be >= 1, got {iters}")
    n, m = src.data.shape[0], tgt.data.shape[0]
    c = pairwise_distances(src, tgt).data
    log_a, log_b = -np.log(n), -np.log(m)
    eps_start = max(float(c.max()), epsilon)
    k_anneal = max(1, (2 * iters) // 3)
    decay = (epsilon / eps_start) ** (1.0 / k_anneal)
    f = np.zeros(n)
    g = np.zeros(m)
    for k in range(iters):
        eps_k = max(epsilon, eps_start * decay**k)
        g = eps_k * (log_b - _lse((-c.T + f) / eps_k))
        f = eps_k * (log_a - _lse((-c + g) / eps_k))
    return np.exp((-c + g + f[:, None]) / epsilon)


def _lse(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))).ravel()


def exact_ot_oracle(source: np.ndarray, target: np.ndarray) -> TransportPlan:
    """Brute-force optimal transport between equal-size uniform clouds.

    With equal masses the optimum is a permutation plan, so enumerating all
    n! pairings is exact. Limited to n <= 8.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n, m = source.shape[0], target.shape[0]
    if n != m:
        raise ScopeError(f"exact oracle needs equal cloud sizes, got {n} and {m}")
    if n > 8:
        raise ScopeError(f"exact oracle limited to n <= 8, got {n}")
    cost = np.linalg.norm(source[:, None, :] - target[None, :, :], axis=2)
    best_perm, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        c = cost[range(n), perm].sum() / n
        if c < best_cost:
            best_cost, best_perm = c, perm
    plan = np.zeros((n, n))
    plan[range(n), best_perm] = 1.0 / n
    return TransportPlan(plan=plan, cost=float(best_cost))


def compatibility_loss(d_pos: Tensor, d_neg: Tensor) -> Tensor:
    """Mean of e^{d+} / (e^{d+} + e^{d-}), i.e. sigmoid(d+ - d-); stable."""
    if d_pos.data.shape != d_neg.data.shape or d_pos.data.ndim != 1:
        raise ContractError(
            f"compatibility_loss: batch shapes differ, {d_pos.data.shape} vs {d_neg.data.shape}"
        )
    return nc.tmean(nc.sigmoid(nc.sub(d_pos, d_neg)))


def compatibility_loss_allclass(d_pos: Tensor, d_all: Tensor) -> Tensor:
    """Prose variant: normalize over distances to every class, not just the
    mined negative. `d_all` is (N, K) with the positive-class column included."""
    if d_all.data.ndim != 2 or d_all.data.shape[0] != d_pos.data.shape[0]:
        raise ContractError("compatibility_loss_allclass: shape mismatch")
    denom = nc.logsumexp_rows(d_all)
    return nc.tmean(nc.exp(nc.sub(d_pos, denom)))


def domain_loss(sketch_logits: Tensor, photo_logits: Tensor, t: float) -> Tensor:
    """Soft-target BCE on the domain classifier: sketches target 1-t,
    photos target t, averaged over all 3N triplet members."""
    if not 0.0 < t < 1.0:
        raise ConfigError(f"domain target t must lie in (0, 1), got {t}")
    # BCE(z, q) = softplus(z) - q*z
    s_terms = nc.sub(nc.softplus(sketch_logits), nc.mul(sketch_logits, Tensor(1.0 - t)))
    p_terms = nc.sub(nc.softplus(photo_logits), nc.mul(photo_logits, Tensor(t)))
    total = nc.add(nc.tsum(s_terms), nc.tsum(p_terms))
    n_terms = sketch_logits.data.shape[0] + photo_logits.data.shape[0]
    return nc.mul(total, Tensor(1.0 / n_terms))


def _nll(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, c = logits.data.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise ContractError("classification_loss: labels do not match batch")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError("classification_loss: label index out of range")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    true_logit = nc.tsum(nc.mul(logits, Tensor(onehot)), axis=1)
    return nc.tsum(nc.sub(nc.logsumexp_rows(logits), true_logit))


def classification_loss(
    sketch_logits: Tensor,
    pos_logits: Tensor,
    neg_logits: Tensor,
    anchor_labels: np.ndarray,
    neg_labels: np.ndarray,
) -> Tensor:
    """Mean NLL of the true label over the three triplet streams.

    The anchor sketch and positive photo share the anchor label; the
    negative photo is scored against its own label.
    """
    total = nc.add(
        nc.add(_nll(sketch_logits, anchor_labels), _nll(pos_logits, anchor_labels)),
        _nll(neg_logits, neg_labels),
    )
    n_terms = (
        sketch_logits.data.shape[0] + pos_logits.data.shape[0] + neg_logits.data.shape[0]
    )
    return nc.mul(total, Tensor(1.0 / n_terms))


def semantic_loss(decoded: Tensor, targets: Tensor) -> Tensor:
    """Mean of 1 - cos(decoded_i, target_i).

    Zero-norm decoded rows contribute a constant 1 with no gradient (the
    cosine is masked out of the graph); zero-norm targets are a data error.
    """
    if decoded.data.shape != targets.data.shape or decoded.data.ndim != 2:
        raise ContractError(
            f"semantic_loss: shapes differ, {decoded.data.shape} vs {targets.data.shape}"
        )
    t_norms = np.linalg.norm(targets.data, axis=1)
    if np.any(t_norms <= 1e-12):
        raise DataError("semantic_loss: zero-norm target vector")
    d_norm = nc.sqrt(nc.tsum(nc.mul(decoded, decoded), axis=1))
    live = (d_norm.data > 1e-12).astype(np.float64)  # constant mask
    t_norm = nc.sqrt(nc.tsum(nc.mul(targets, targets), axis=1))
    denom = nc.clamp_min(nc.mul(d_norm, t_norm), 1e-12)
    cos = nc.div(nc.tsum(nc.mul(decoded, targets), axis=1), denom)
    return nc.tmean(nc.sub(Tensor(1.0), nc.mul(cos, Tensor(live))))


def total_loss(
    wasserstein: Tensor,
    compatibility: Tensor,
    domain: Tensor,
    classification: Tensor,
    semantic: Tensor,
    weights: LossWeights,
) -> tuple[Tensor, LossReport]:
    """Weighted sum W + l1*comp + l2*dom + l3*cls + l4*sem, plus a float report."""
    weights.validate()
    components = {
        "wasserstein": wasserstein,
        "compatibility": compatibility,
        "domain": domain,
        "classification": classification,
        "semantic": semantic,
    }
    for name, c in components.items():
        if not np.all(np.isfinite(c.data)):
            raise NumericError(f"total_loss: component '{name}' is non-finite")
    total = wasserstein
    for lam, term in (
        (weights.lambda1, compatibility),
        (weights.lambda2, domain),
        (weights.lambda3, classification),
        (weights.lambda4, semantic),
    ):
        total = nc.add(total, nc.mul(term, Tensor(lam)))
    report = LossReport(
        wasserstein=wasserstein.item(),
        compatibility=compatibility.item(),
        domain=domain.item(),
        classification=classification.item(),
        semantic=semantic.item(),
        total=total.item(),
    )
    return total, report

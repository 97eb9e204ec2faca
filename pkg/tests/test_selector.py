import itertools

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings, strategies as st

from optsel import gradcore
from optsel.errors import ConfigError, SolverError
from optsel.optstate import Preconditioner, precondition_target
from optsel.gradcore import ProjectedSample, ValAggregate
from optsel.selector import (
    GramSystem,
    alignment_l2_check,
    build_gram_system,
    greedy_filter,
    nnls_kkt,
    nnls_solve,
    objective_value,
    omp_select,
    parse_strategy,
    ridge_solve,
    run_strategy,
    second_order_utility,
    shapley_first_order,
    subset_objective,
    topk_select,
    two_stage_select,
    weigh_subset,
)


def from_matrix(m, sid=0):
    """Projected sample whose outer-product matrix is exactly ``m``."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    return ProjectedSample(sid, ((m, np.eye(m.shape[1])),))


def target(m):
    """Identity-preconditioned target plus its raw aggregate."""
    raw = ValAggregate((np.atleast_2d(np.asarray(m, dtype=np.float64)),), 1)
    return raw, precondition_target(raw, Preconditioner.ones(raw.shapes))


def random_system(rng, n, lam=0.0):
    X = rng.standard_normal((n + 3, n))
    return GramSystem(X.T @ X, rng.standard_normal(n), lam, 5.0)


# --- GramSystem / objective ------------------------------------------------

def test_gram_system_validation():
    with pytest.raises(ConfigError):
        GramSystem(np.array([[1.0, 2.0], [0.0, 1.0]]), [0, 0])
    with pytest.raises(ConfigError):
        GramSystem(np.array([[1.0, 2.0], [2.0, 1.0]]), [0, 0])  # indefinite
    with pytest.raises(ConfigError):
        GramSystem(np.eye(2), [1.0])
    with pytest.raises(ConfigError):
        GramSystem(np.eye(1), [1.0], lam=-1)


def test_build_self_target_and_orthogonal():
    t = np.array([[1.0, 2.0], [0.5, -1.0]])
    raw, pre = target(t)
    sys = build_gram_system([from_matrix(t)], raw, pre)
    n2 = float(np.sum(t * t))
    np.testing.assert_allclose(sys.G, [[n2]])
    np.testing.assert_allclose(sys.b, [n2])
    assert sys.target_sq_norm == pytest.approx(n2)
    e = np.eye(4).reshape(4, 2, 2)
    sys = build_gram_system([from_matrix(m, i) for i, m in enumerate(e)], raw, pre)
    np.testing.assert_allclose(sys.G, np.eye(4), atol=1e-15)


def test_build_matches_materialized_oracle(rng):
    cands = [ProjectedSample.from_sample(gradcore.SampleGradient(i, (
        gradcore.FactorPair(0, rng.standard_normal((3, 4)), rng.standard_normal((2, 4))),
        gradcore.FactorPair(1, rng.standard_normal((2, 4)), rng.standard_normal((5, 4))))))
        for i in range(6)]
    tgt = [rng.standard_normal((3, 2)), rng.standard_normal((2, 5))]
    raw = ValAggregate(tuple(tgt), 2)
    D = Preconditioner((rng.uniform(0.5, 2, (3, 2)), rng.uniform(0.5, 2, (2, 5))))
    pre = precondition_target(raw, D)
    sys = build_gram_system(cands, raw, pre)
    vec = np.stack([np.concatenate([m.ravel() for m in c.matrices()]) for c in cands])
    pt = np.concatenate([d.ravel() * t.ravel() for d, t in zip(D.per_layer, tgt)])
    np.testing.assert_allclose(sys.G, vec @ vec.T, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(sys.b, vec @ pt, rtol=1e-9, atol=1e-9)
    assert sys.target_sq_norm == pytest.approx(pt @ pt, rel=1e-12)


def test_build_rejects():
    raw, pre = target(np.eye(2))
    with pytest.raises(ConfigError):
        build_gram_system([], raw, pre)
    with pytest.raises(ConfigError):
        build_gram_system([from_matrix(np.eye(2))], raw, raw)


def test_objective_examples(rng):
    sys = GramSystem([[1.0]], [1.0], 0.0, 3.0)
    assert objective_value(sys, [0.0]) == 3.0
    assert objective_value(sys, [1.0]) == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        objective_value(sys, [1.0, 2.0])


def test_objective_matches_materialized_residual(rng):
    for _ in range(5):
        vecs = rng.standard_normal((5, 6))
        t = rng.standard_normal(6)
        w = rng.standard_normal(5)
        lam = 0.3
        sys = GramSystem(vecs @ vecs.T, vecs @ t, lam, float(t @ t))
        direct = np.sum((t - w @ vecs) ** 2) + lam * w @ w
        assert objective_value(sys, w) == pytest.approx(direct, rel=1e-9, abs=1e-9)


# --- greedy filter ---------------------------------------------------------

def test_greedy_duplicate_tie_example():
    e1, e2 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    raw, pre = target(e1 + e2)
    cands = [from_matrix(e1, 0), from_matrix(e1, 1), from_matrix(e2, 2)]
    for scale in ("matched", "raw"):
        assert greedy_filter(cands, pre, 2, scale=scale) == [0, 2]


def test_greedy_exhaustion_orthogonal_and_budget(rng):
    cands = [from_matrix(rng.standard_normal((2, 2)), i) for i in range(5)]
    _, pre = target(rng.standard_normal((2, 2)))
    assert sorted(greedy_filter(cands, pre, 5)) == list(range(5))
    assert greedy_filter(cands, pre, 0) == []
    with pytest.raises(ConfigError):
        greedy_filter(cands, pre, 6)
    _, orth = target([[0.0, 0.0, 1.0]])
    flat = [from_matrix([[1.0, 0.0, 0.0]], 0), from_matrix([[0.0, 2.0, 0.0]], 1)]
    assert greedy_filter(flat, orth, 1) == [0]


def test_greedy_preconditioned_residual_switch():
    _, pre = target([[1.0, 1.0]])
    cands = [from_matrix([[1.0, 0.0]]), from_matrix([[0.9, 0.0]]), from_matrix([[0.0, 0.8]])]
    D = Preconditioner((np.array([[0.1, 1.0]]),))
    with pytest.raises(ConfigError):
        greedy_filter(cands, pre, 2, precondition_residual_updates=True)
    # raw subtraction removes the full first coordinate; the scaled one leaves most of it
    assert greedy_filter(cands, pre, 2, scale="raw") == [0, 2]
    assert greedy_filter(cands, pre, 2, scale="raw", precondition_residual_updates=True,
                         preconditioner=D) == [0, 1]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 8), budget=st.integers(1, 8))
def test_greedy_permutation_equivariant(seed, n, budget):
    budget = min(budget, n)
    rng = np.random.default_rng(seed)
    mats = rng.standard_normal((n, 2, 3))
    _, pre = target(rng.standard_normal((2, 3)))
    perm = rng.permutation(n)
    base = greedy_filter([from_matrix(m) for m in mats], pre, budget)
    permuted = greedy_filter([from_matrix(mats[p]) for p in perm], pre, budget)
    assert [int(perm[i]) for i in permuted] == base


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(1e-4, 1e4), budget=st.integers(1, 6))
def test_selection_scale_invariance(seed, c, budget):
    rng = np.random.default_rng(seed)
    cands = [from_matrix(m, i) for i, m in enumerate(rng.standard_normal((6, 2, 2)))]
    raw, pre = target(rng.standard_normal((2, 2)))
    sys = build_gram_system(cands, raw, pre)
    sys_c = build_gram_system(cands, raw.scaled(c), pre.scaled(c))
    np.testing.assert_allclose(sys_c.b, c * sys.b, rtol=1e-12, atol=1e-300)
    assert topk_select(sys_c.b, budget) == topk_select(sys.b, budget)
    assert greedy_filter(cands, pre.scaled(c), budget) == greedy_filter(cands, pre, budget)


# --- ridge / nnls ----------------------------------------------------------

def test_ridge_examples(rng):
    np.testing.assert_allclose(ridge_solve(GramSystem([[1.0]], [2.0], 1.0), [0]), [1.0])
    np.testing.assert_allclose(ridge_solve(GramSystem(np.eye(2), [1.0, -1.0]), [0, 1]), [1.0, -1.0])
    sys = random_system(rng, 4, lam=0.2)
    expect = scipy.linalg.cho_solve(scipy.linalg.cho_factor(sys.G + 0.2 * np.eye(4)), sys.b)
    np.testing.assert_allclose(ridge_solve(sys, range(4)), expect, rtol=1e-10)
    with pytest.raises(SolverError, match="lam > 0"):
        ridge_solve(GramSystem(np.ones((2, 2)), [1.0, 1.0]), [0, 1])
    with pytest.raises(ConfigError):
        ridge_solve(sys, [])


def test_nnls_examples():
    np.testing.assert_allclose(nnls_solve(GramSystem(np.eye(2), [1.0, -1.0]), [0, 1]), [1.0, 0.0])
    G = np.array([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_array_equal(nnls_solve(GramSystem(G, [-1.0, 0.0]), [0, 1]), [0.0, 0.0])


def projected_gradient(Q, c, iters=100_000):
    step = 1.0 / np.linalg.eigvalsh(Q)[-1]
    x = np.zeros(c.size)
    for _ in range(iters):
        x = np.maximum(x - step * (Q @ x - c), 0.0)
    return x


def test_nnls_matches_projected_gradient_oracle():
    rng = np.random.default_rng(7)
    for _ in range(3):
        sys = random_system(rng, 5, lam=0.05)
        Q = sys.G + sys.lam * np.eye(5)
        w_ref = projected_gradient(Q, sys.b)
        w = nnls_solve(sys, range(5))
        assert objective_value(sys, w) == pytest.approx(objective_value(sys, w_ref), abs=1e-8)
        # scipy's NNLS on the Cholesky factor is a second, unrelated reference
        R = np.linalg.cholesky(Q).T
        w_sp, _ = scipy.optimize.nnls(R, np.linalg.solve(R.T, sys.b))
        np.testing.assert_allclose(w, w_sp, atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 8), lam=st.sampled_from([0.0, 1e-3, 1.0]))
def test_nnls_kkt_property(seed, n, lam):
    rng = np.random.default_rng(seed)
    sys = random_system(rng, n, lam)
    w = nnls_solve(sys, range(n))
    assert np.all(w >= 0)
    stat, dual, scale = nnls_kkt(sys, range(n), w)
    assert stat <= 1e-8 * scale and dual <= 1e-8 * scale


# --- omp -------------------------------------------------------------------

def literal_omp(sys, budget):
    """Trial enumeration: every unchosen candidate, ridge weights, keep the minimum."""
    S, w_best = [], None
    for _ in range(budget):
        best = (np.inf, None, None)
        for u in range(sys.n):
            if u in S:
                continue
            T = S + [u]
            GT = sys.G[np.ix_(T, T)] + sys.lam * np.eye(len(T))
            w = np.linalg.solve(GT, sys.b[T])
            err = sys.target_sq_norm - 2 * w @ sys.b[T] + w @ sys.G[np.ix_(T, T)] @ w + sys.lam * w @ w
            if err < best[0]:
                best = (err, u, w)
        S.append(best[1])
        w_best = best[2]
    return S, w_best


def test_omp_matches_literal_transcription():
    rng = np.random.default_rng(11)
    for _ in range(5):
        sys = random_system(rng, 6, lam=0.1)
        out = omp_select(sys, 3)
        S, w = literal_omp(sys, 3)
        assert list(out.indices) == S
        np.testing.assert_allclose(out.weights, w, rtol=1e-10)
        assert out.residual_norm == pytest.approx(np.sqrt(max(out.objective, 0)))


def test_omp_budget_one_closed_form(rng):
    sys = random_system(rng, 7, lam=0.3)
    out = omp_select(sys, 1)
    assert out.indices[0] == int(np.argmax(sys.b ** 2 / (np.diag(sys.G) + 0.3)))


def test_omp_exact_reconstruction():
    coef = np.array([0.0, 2.0, 0.0, -1.5])
    sys = GramSystem(np.eye(4), coef, 1e-12, float(coef @ coef))
    out = omp_select(sys, 2)
    assert sorted(out.indices) == [1, 3]
    assert out.objective == pytest.approx(0.0, abs=1e-10)


def test_omp_rejects():
    with pytest.raises(ConfigError):
        omp_select(GramSystem(np.eye(2), [1.0, 1.0], 0.0), 1)
    with pytest.raises(ConfigError):
        omp_select(GramSystem(np.eye(2), [1.0, 1.0], 1.0), 3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_omp_objective_monotone_in_budget(seed):
    sys = random_system(np.random.default_rng(seed), 6, lam=0.05)
    objs = [omp_select(sys, k).objective for k in range(1, 7)]
    assert all(b <= a + 1e-10 for a, b in zip(objs, objs[1:]))


# --- top-k / two-stage -----------------------------------------------------

def test_topk_examples():
    assert topk_select([3, 1, 2], 2) == [0, 2]
    assert topk_select([5, 5, 5, 5], 3) == [0, 1, 2]
    assert topk_select([1, 4, 2], 3) == [1, 2, 0]
    with pytest.raises(ConfigError):
        topk_select([1, 2], 3)


def test_two_stage_single_proportional():
    t = np.array([[1.0, 2.0]])
    raw, pre = target(t)
    for c, lam in ((0.5, 0.0), (-2.0, 0.0), (3.0, 0.7)):
        out = two_stage_select([from_matrix(c * t)], raw, pre, 1, lam)
        G = c * c * 5.0
        assert out.weights[0] == pytest.approx(max(c * 5.0 / (G + lam), 0.0), rel=1e-12)


def test_two_stage_exact_nonneg_combination():
    basis = np.eye(3).reshape(3, 1, 3)
    coef = np.array([0.5, 2.0, 1.0])
    raw, pre = target(np.tensordot(coef, basis, 1))
    out = two_stage_select([from_matrix(m, i) for i, m in enumerate(basis)], raw, pre, 3, 0.0)
    np.testing.assert_allclose(out.weights[np.argsort(out.indices)], coef, atol=1e-12)
    assert out.objective == pytest.approx(0.0, abs=1e-12)


def test_two_stage_adversary_gets_zero(rng):
    t = rng.standard_normal((2, 3))
    raw, pre = target(t)
    cands = [from_matrix(t + 0.3 * rng.standard_normal((2, 3)), i) for i in range(3)]
    cands.append(from_matrix(-t, 3))
    sys = build_gram_system(cands, raw, pre)
    w = nnls_solve(sys, range(4))
    assert w[3] == 0.0
    stat, dual, scale = nnls_kkt(sys, range(4), w)
    assert (sys.G @ w - sys.b)[3] >= -1e-8 * scale


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_two_stage_beats_unit_weights(seed):
    rng = np.random.default_rng(seed)
    cands = [from_matrix(m, i) for i, m in enumerate(rng.standard_normal((6, 2, 2)))]
    raw, pre = target(rng.standard_normal((2, 2)))
    out = two_stage_select(cands, raw, pre, 3, 0.01)
    sys = build_gram_system(cands, raw, pre, 0.01)
    assert out.objective <= subset_objective(sys, out.indices, np.ones(3)) + 1e-10
    assert np.all(out.weights >= 0)


# --- utilities -------------------------------------------------------------

def test_shapley_examples_and_finite_difference():
    assert shapley_first_order(1.0, 2.0, 0.1) == pytest.approx(-0.2)
    assert shapley_first_order(0.0, 2.0, 0.1) == 0.0
    # one-parameter model: train loss (theta - 3)^2 / 2, target loss (theta - 1)^2 / 2
    theta, lr, w, h = 0.2, 1e-4, 0.7, 1.0
    g_tr, g_val = theta - 3.0, theta - 1.0
    before = 0.5 * (theta - 1.0) ** 2
    after = 0.5 * (theta - lr * h * w * g_tr - 1.0) ** 2
    assert after - before == pytest.approx(shapley_first_order(w, g_val * g_tr, lr), abs=1e-5)


def test_second_order_utility_examples(rng):
    sys = random_system(rng, 4)
    assert second_order_utility(sys, np.zeros(4), 0.3) == 0.0
    w = rng.standard_normal(4)
    lin, quad = -(w @ sys.b), 0.5 * w @ sys.G @ w
    assert second_order_utility(sys, w, 2.0) == pytest.approx(2 * lin + 4 * quad)
    with pytest.raises(ConfigError):
        second_order_utility(sys, np.zeros(3), 1.0)


def test_objective_utility_identity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        sys = random_system(rng, 5)
        w = rng.standard_normal(5)
        lhs = objective_value(sys, w) - sys.target_sq_norm
        rhs = 2 * second_order_utility(sys, w, 1.0)
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12)


def test_alignment_check_examples():
    v = np.array([1.0, -2.0, 0.5])
    ip, sh, cos, unit = alignment_l2_check(v, [v, -v])
    assert (ip, cos) == (0, 0)
    ip, sh, cos, unit = alignment_l2_check(v, [2 * v, v / 2])
    assert (ip, sh) == (0, 0)
    assert cos == 0 and unit == 0  # tie goes to the lowest index
    with pytest.raises(ConfigError):
        alignment_l2_check(v, [v, np.zeros(3)])


def test_alignment_equalities_random():
    rng = np.random.default_rng(50)
    for _ in range(50):
        v = rng.standard_normal(8)
        H = rng.standard_normal((int(rng.integers(2, 10)), 8))
        ip, sh, cos, unit = alignment_l2_check(v, list(H))
        assert ip == sh and cos == unit


# --- strategies ------------------------------------------------------------

def test_parse_strategy():
    assert parse_strategy("two_stage") == "two_stage"
    with pytest.raises(ConfigError):
        parse_strategy("best")


@pytest.mark.parametrize("name", ["two_stage", "omp", "topk_aware", "topk_raw", "random", "grad_match",
                                  "hard_filter_reweight", "vanilla_reweight", "unbounded"])
def test_run_strategy_contract(name, rng):
    cands = [from_matrix(m, i) for i, m in enumerate(rng.standard_normal((8, 2, 3)))]
    raw = ValAggregate((rng.standard_normal((2, 3)),), 4)
    D = Preconditioner((rng.uniform(0.5, 2.0, (2, 3)),))
    out = run_strategy(name, cands, raw, precondition_target(raw, D), 3, rng=np.random.default_rng(0))
    assert len(out.indices) == 3 and len(set(out.indices)) == 3
    assert out.weights.shape == (3,)
    if name not in ("unbounded", "omp", "grad_match"):
        assert np.all(out.weights >= 0)


def test_run_strategy_degenerate_pool():
    cands = [from_matrix(np.zeros((2, 2)), i) for i in range(4)]
    raw = ValAggregate((np.ones((2, 2)),), 1)
    out = run_strategy("two_stage", cands, raw, precondition_target(raw, Preconditioner.ones(raw.shapes)), 2)
    assert out.indices == (0, 1)
    np.testing.assert_array_equal(out.weights, [0.0, 0.0])


def test_weigh_subset_methods(rng):
    sys = random_system(rng, 4, 0.1)
    assert weigh_subset(sys, []).objective == sys.target_sq_norm
    np.testing.assert_array_equal(weigh_subset(sys, [0, 2], "unit").weights, [1.0, 1.0])
    with pytest.raises(ConfigError):
        weigh_subset(sys, [0], "lasso")

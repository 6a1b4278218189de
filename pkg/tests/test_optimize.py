import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixopt.domains import Mixture
from mixopt.errors import InfeasibleCaps, NoFeasibleCandidate, ValidationError
from mixopt.objective import Composed, LogLinearObjective, Objective, Scaled, WeightedSum
from mixopt.optimize import Exact, Search, SolveSpec, kl, project_capped_simplex, solve, solve_exact, solve_search

from oracles import grid_argmin, kl_terms, loglinear_mean, tv


class Constant(Objective):
    convex = True

    def __init__(self, m):
        self.m = m

    def value_grad(self, p):
        return 1.0, np.zeros(self.m)


def mix(w):
    return Mixture([f"d{j}" for j in range(len(w))], w)


def test_constant_objective_returns_anchor():
    p0 = mix([0.25, 0.25, 0.5])
    res = solve_exact(Constant(3), SolveSpec(p0, 0.05))
    assert tv(res.weights, p0.weights) <= 1e-6


def test_single_task_goes_to_zero_slope_domain():
    F = LogLinearObjective([1.0], [[1.0, 0.0]])
    res = solve_exact(F, SolveSpec(mix([0.5, 0.5]), 0.0))
    assert tv(res.weights, [0.0, 1.0]) <= 1e-6
    assert res.diagnostics["converged"]


def test_single_task_with_cap():
    F = LogLinearObjective([1.0], [[1.0, 0.0]])
    res = solve_exact(F, SolveSpec(mix([0.5, 0.5]), 0.0, np.array([1.0, 0.3])))
    assert res.weights == pytest.approx([0.7, 0.3], abs=1e-9)
    assert res.diagnostics["active_caps"] == ["d1"]


def test_kl_zero_anchor_forces_zero():
    F = LogLinearObjective([1.0], [[0.0, 0.0, -3.0]])
    res = solve_exact(F, SolveSpec(mix([0.5, 0.5, 0.0]), 0.05))
    assert res.weights[2] == 0.0
    res0 = solve_exact(F, SolveSpec(mix([0.5, 0.5, 0.0]), 0.0))
    assert res0.weights[2] == pytest.approx(1.0, abs=1e-9)


def test_infeasible_caps():
    with pytest.raises(InfeasibleCaps):
        SolveSpec(mix([0.5, 0.5]), 0.0, np.array([0.2, 0.2]))
    with pytest.raises(InfeasibleCaps):
        project_capped_simplex(np.array([0.1, 0.2]), np.array([0.3, 0.3]))
    with pytest.raises(InfeasibleCaps):
        # support of p0 has too little cap room once the KL rule zeros the rest
        SolveSpec(mix([1.0, 0.0]), 0.05, np.array([0.5, 1.0])).effective_caps()


def test_lambda_validation():
    with pytest.raises(ValidationError):
        SolveSpec(mix([0.5, 0.5]), -1.0)


def test_nonconvex_rejected_by_exact():
    F = Scaled(LogLinearObjective([1.0], [[1.0, 0.0]]), -1.0)
    with pytest.raises(ValidationError):
        solve_exact(F, SolveSpec(mix([0.5, 0.5]), 0.0))


def test_search_single_candidate_returns_it():
    F = LogLinearObjective([1.0], [[1.0, -1.0, 0.2]])
    spec = SolveSpec(mix([0.2, 0.3, 0.5]), 0.0, solver=Search(candidates=1, rounds=1, seed=9))
    res = solve_search(F, spec)
    rng = np.random.default_rng(9)
    alpha = np.maximum(50 * np.array([0.2, 0.3, 0.5]), 1e-3)
    g = rng.standard_gamma(np.broadcast_to(alpha, (1, 3)))
    assert res.weights == pytest.approx(g[0] / g[0].sum(), abs=1e-15)


def test_search_no_feasible_candidate():
    F = LogLinearObjective([1.0], [[0.0, 0.0]])
    # the prior's mass sits on d0, whose cap excludes nearly every draw
    spec = SolveSpec(mix([0.999, 0.001]), 0.0, np.array([0.01, 1.0]), Search(candidates=8, rounds=2, seed=0))
    with pytest.raises(NoFeasibleCandidate):
        solve_search(F, spec)


def test_search_is_deterministic():
    F = LogLinearObjective([1.0, 0.4], [[1.0, -1.0, 0.2], [0.1, 0.5, -0.7]])
    spec = SolveSpec(mix([0.2, 0.3, 0.5]), 0.05, solver=Search(seed=4))
    assert solve(F, spec).mixture == solve(F, spec).mixture


@st.composite
def loglinear_instance(draw, max_m=6):
    m = draw(st.integers(2, max_m))
    n = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.2, 1.0, n)
    A = rng.normal(size=(n, m))
    p0 = rng.dirichlet(np.ones(m))
    caps = None
    if draw(st.booleans()):
        caps = np.minimum(1.0, rng.uniform(0.1, 1.0, m))
        if caps.sum() < 1.0:
            caps = caps / caps.sum() * 1.2
    return c, A, p0, caps


@given(loglinear_instance(), st.sampled_from([0.0, 0.05, 1.0]))
def test_exact_output_feasible_and_beats_search(inst, lam):
    c, A, p0, caps = inst
    F = LogLinearObjective(c, A)
    spec = SolveSpec(mix(p0), lam, caps)
    ex = solve_exact(F, spec)
    w = ex.weights
    assert abs(w.sum() - 1) <= 1e-9 and np.all(w >= 0)
    if caps is not None:
        assert np.all(w <= caps + 1e-12)
    try:
        se = solve_search(F, SolveSpec(mix(p0), lam, caps, Search(seed=1)))
    except NoFeasibleCandidate:
        return
    assert ex.value <= se.value + 1e-9


@given(loglinear_instance(max_m=5))
@settings(max_examples=25)
def test_kl_monotone_in_lambda(inst):
    c, A, p0, caps = inst
    F = LogLinearObjective(c, A)
    kls = [kl(solve_exact(F, SolveSpec(mix(p0), lam, caps, Exact(tol=1e-11))).weights, p0) for lam in (0, 0.01, 0.05, 1, 100)]
    assert all(b <= a + 1e-7 for a, b in zip(kls, kls[1:]))


@given(st.integers(0, 2**31))
@settings(max_examples=20)
def test_exact_matches_grid_for_small_m(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 4))
    c = rng.uniform(0.2, 1.0, 2)
    A = rng.normal(size=(2, m))
    p0 = rng.dirichlet(np.ones(m))
    ex = solve_exact(LogLinearObjective(c, A), SolveSpec(mix(p0), 0.05))
    q = grid_argmin(c, A, 0.05, p0)
    assert ex.value <= loglinear_mean(c, A, q)[0] + 0.05 * kl_terms(q, p0)[0] + 1e-12
    assert ex.diagnostics["converged"]


# --- objectives ----------------------------------------------------------------


@given(st.integers(0, 2**31))
def test_loglinear_hessian_psd_and_matches_fd(seed):
    rng = np.random.default_rng(seed)
    m, n = 5, 3
    F = LogLinearObjective(rng.uniform(0.2, 1, n), rng.normal(size=(n, m)))
    p = rng.dirichlet(np.ones(m))
    H = F.hess(p)
    assert np.linalg.eigvalsh(H).min() >= -1e-8
    Hfd = Objective.hess(F, p)
    assert np.allclose(H, Hfd, rtol=1e-4, atol=1e-6)


def test_compose_matches_composed():
    rng = np.random.default_rng(0)
    F = LogLinearObjective(rng.uniform(0.2, 1, 3), rng.normal(size=(3, 4)))
    E = np.array([[0.5, 0, 0], [0.5, 0, 0], [0, 1, 0], [0, 0, 1]])
    r = np.array([0.3, 0.3, 0.4])
    assert F.compose(E).value(r) == pytest.approx(Composed(F, E).value(r), rel=1e-14)
    assert F.compose(E).value(r) == pytest.approx(F.value(E @ r), rel=1e-14)


def test_weighted_sum_and_scaled():
    F1 = LogLinearObjective([1.0], [[1.0, 0.0]])
    F2 = LogLinearObjective([0.5], [[0.0, 2.0]])
    W = WeightedSum([F1, F2], [0.25, 0.75])
    p = np.array([0.4, 0.6])
    assert W.value(p) == pytest.approx(0.25 * F1.value(p) + 0.75 * F2.value(p))
    assert Scaled(F1, -2.0).value(p) == pytest.approx(-2.0 * F1.value(p))
    assert np.allclose(W.values(np.array([p, p])), W.value(p))

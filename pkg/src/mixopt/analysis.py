"""Diagnostics for mixture reuse: coupling, gaps, bound constants, distances."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .domains import DomainSet, DomainUpdate, Mixture, RepetitionBudget, UpdateKind, apply_update, repetition_caps
from .errors import (
    DimensionMismatch,
    LengthMismatch,
    NonPositiveMu,
    ValidationError,
    WrongFamily,
    WrongUpdateKind,
    ZeroVariance,
)
from .objective import LogLinearObjective, Objective
from .optimize import Exact, SolveSpec, project_capped_simplex, solve_exact
from .oracle import GroundTruthModel
from .regression import ModelSet, loglinear_matrix
from .reuse import ReusePlan, collapsed_caps

MU_FLOOR = 1e-8
MU_SAMPLES = 200


# ---------------------------------------------------------------------------
# coupling
# ---------------------------------------------------------------------------


@dataclass
class CouplingReport:
    alpha_fix: np.ndarray
    alpha_comp: np.ndarray
    kappa: float
    contributions: np.ndarray

    def to_dict(self):
        return {
            "alpha_fix": self.alpha_fix.tolist(),
            "alpha_comp": self.alpha_comp.tolist(),
            "kappa": self.kappa,
            "contributions": self.contributions.tolist(),
        }


def _slopes(models, ids=None):
    """(ids, A) for a truth, a log-linear ModelSet or a ``(ids, A)`` pair."""
    if isinstance(models, GroundTruthModel):
        return models.ids, models.A
    if isinstance(models, ModelSet):
        return models.ids, loglinear_matrix(models)[1]
    if isinstance(models, tuple) and len(models) == 2:
        return tuple(models[0]), np.atleast_2d(np.asarray(models[1], dtype=np.float64))
    raise WrongFamily(f"coupling analysis needs log-linear models, got {type(models).__name__}")


def _columns(ids, wanted):
    pos = {d: k for k, d in enumerate(ids)}
    missing = [w for w in wanted if w not in pos]
    if missing:
        raise ValidationError(f"unknown domains {missing}")
    return [pos[w] for w in wanted]


def kappa_from_norms(alpha_fix, alpha_comp) -> float:
    return float(np.linalg.norm((1.0 + alpha_fix + alpha_comp) * alpha_fix))


def coupling_kappa(models, fix_ids, comp_ids) -> CouplingReport:
    """Coupling ``|| (1 + a_fix + a_comp) * a_fix ||`` with per-task slope norms ``a``."""
    ids, A = _slopes(models)
    Af = A[:, _columns(ids, fix_ids)]
    Ac = A[:, _columns(ids, comp_ids)]
    af = np.linalg.norm(Af, axis=1)
    ac = np.linalg.norm(Ac, axis=1)
    contrib = (1.0 + af + ac) * af
    return CouplingReport(af, ac, float(np.linalg.norm(contrib)), contrib)


def rank_recompute_candidates(models, unaffected, affected):
    """For each unaffected id, the coupling left after moving it to the recomputed side.

    Returns ``[(id, kappa_after, delta_kappa), ...]`` sorted by decreasing
    reduction (ties by id).
    """
    unaffected, affected = list(unaffected), list(affected)
    base = coupling_kappa(models, unaffected, affected).kappa
    rows = []
    for d in unaffected:
        fix = [u for u in unaffected if u != d]
        k = coupling_kappa(models, fix, affected + [d]).kappa
        rows.append((d, k, base - k))
    rows.sort(key=lambda r: (-r[2], r[0]))
    return rows


# ---------------------------------------------------------------------------
# distances and correlations
# ---------------------------------------------------------------------------


def _aligned_pair(a, b):
    if isinstance(a, Mixture) and isinstance(b, Mixture):
        if a.ids != b.ids:
            if set(a.ids) != set(b.ids):
                raise DimensionMismatch("mixtures are over different domain sets")
            b = b.restrict(a.ids)
        return a.weights, b.weights
    a = np.asarray(getattr(a, "weights", a), dtype=np.float64)
    b = np.asarray(getattr(b, "weights", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch("mixtures differ in length")
    return a, b


def tv_distance(a, b) -> float:
    """Total variation ``0.5 * sum |a - b|``."""
    x, y = _aligned_pair(a, b)
    return float(0.5 * np.abs(x - y).sum())


def rank_correlation(xs, ys) -> float:
    """Spearman correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise LengthMismatch("inputs must be 1-D with equal lengths")
    if xs.size < 2:
        raise LengthMismatch("need at least two points")
    rx, ry = stats.rankdata(xs), stats.rankdata(ys)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise ZeroVariance("rank correlation undefined for constant input")
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float(np.clip(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))


# ---------------------------------------------------------------------------
# strong convexity
# ---------------------------------------------------------------------------


def tangent_basis(m: int) -> np.ndarray:
    """Orthonormal basis (m x (m-1)) of the sum-zero subspace."""
    Q, _ = np.linalg.qr(np.hstack([np.ones((m, 1)), np.eye(m)[:, : m - 1]]))
    return Q[:, 1:m]


def estimate_mu(objective: Objective, caps=None, samples: int = MU_SAMPLES, seed: int = 0) -> float:
    """Smallest tangent-space Hessian eigenvalue over sampled feasible points, floored at 1e-8."""
    m = objective.m
    if m == 1:
        return float("inf")
    B = tangent_basis(m)
    rng = np.random.default_rng(seed)
    caps = np.ones(m) if caps is None else np.asarray(caps, dtype=np.float64)
    lo = np.inf
    for _ in range(samples):
        p = rng.dirichlet(np.ones(m))
        if np.any(p > caps):
            p = project_capped_simplex(p, caps)
        H = B.T @ objective.hess(p) @ B
        lo = min(lo, float(np.linalg.eigvalsh(0.5 * (H + H.T))[0]))
    return max(lo, MU_FLOOR)


# ---------------------------------------------------------------------------
# gaps and bounds
# ---------------------------------------------------------------------------


@dataclass
class GapReport:
    reuse_gap: float
    performance_gap: float
    rho_star: float
    one_minus_rho: float

    def to_dict(self):
        return asdict(self)


def _vec(q, ids):
    if isinstance(q, Mixture):
        if q.ids != tuple(ids):
            if set(q.ids) != set(ids):
                raise DimensionMismatch("mixture is over a different domain set")
            q = q.restrict(ids)
        return q.weights
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(ids),):
        raise DimensionMismatch("mixture length differs from the domain set")
    return q


def _fix_share(q, ids, fix):
    cols = _columns(ids, fix)
    part = q[cols]
    rho = float(part.sum())
    return (part / rho if rho > 0 else np.full(len(cols), np.nan)), rho


def gap_report(truth: GroundTruthModel, plan: ReusePlan, reuse_result, full_result) -> GapReport:
    """Reuse gap, performance gap and rho* on the noiseless truth."""
    ids = plan.post_update.ids
    g = truth.restrict(ids) if truth.ids != ids else truth
    F = g.objective()
    q_reuse = _vec(reuse_result, ids)
    q_full = _vec(full_result, ids)
    qfix, rho = _fix_share(q_full, ids, plan.d_fix)
    ptil = plan.frozen_ratios.weights
    reuse_gap = float(np.linalg.norm(ptil - qfix)) if rho > 0 else float("nan")
    perf = F.value(q_reuse) - F.value(q_full)
    return GapReport(reuse_gap, float(perf), min(max(rho, 0.0), 1.0), 1.0 - min(max(rho, 0.0), 1.0))


def optimum(objective: Objective, ids, caps=None, tol=1e-10) -> Mixture:
    """Noiseless, unregularised optimum on the (capped) simplex."""
    ids = tuple(ids)
    p0 = Mixture(ids, np.full(len(ids), 1.0 / len(ids)))
    spec = SolveSpec(p0, 0.0, caps, Exact(tol=tol))
    return solve_exact(objective, spec).mixture


def reuse_optimum(truth: GroundTruthModel, plan: ReusePlan, caps=None, tol=1e-10) -> Mixture:
    """Exact reuse solution: optimum of the collapsed truth, expanded."""
    ids = plan.post_update.ids
    g = truth.restrict(ids) if truth.ids != ids else truth
    E = plan.expansion_matrix()
    obj = g.objective().compose(E)
    r = optimum(obj, plan.collapsed_domains().ids, caps, tol)
    return Mixture(ids, E @ r.weights, plan.post_update.version)


def _fbar(obj: LogLinearObjective, q):
    return float(obj.value(q) - obj.w @ obj.c)


def _check_mu(mu):
    if mu is not None and not mu > 0:
        raise NonPositiveMu(f"strong-convexity constant must be positive, got {mu}")


def theorem1_constant(truth: GroundTruthModel, plan: ReusePlan, p_tilde=None, mu=None, budget=None, *,
                      q_star=None, q_reuse=None, tol=1e-9):
    """Explicit performance-gap bound ``C * ||p_tilde - q*_fix||``.

    ``C = Fbar(q*) exp(a_max |D|) (Fbar(q*(p))/mu |a_fix + a_comp| kappa + |a_fix|)``
    with ``Fbar`` the truth objective minus its offsets and ``a_max`` the
    largest per-task fixed-slope norm. ``mu`` defaults to the estimated
    strong-convexity constant of the collapsed truth.
    """
    _check_mu(mu)
    ids = plan.post_update.ids
    g = truth.restrict(ids) if truth.ids != ids else truth
    if p_tilde is not None:
        plan = ReusePlan.single(plan.post_update, p_tilde, plan.d_comp)
    F = g.objective()
    full_caps = None if budget is None else repetition_caps(plan.post_update, budget).values
    coll_caps = None if budget is None else collapsed_caps(plan, budget)
    qs = _vec(q_star, ids) if q_star is not None else optimum(F, ids, full_caps).weights
    qr = _vec(q_reuse, ids) if q_reuse is not None else reuse_optimum(g, plan, coll_caps).weights
    qfix, rho = _fix_share(qs, ids, plan.d_fix)
    delta = float(np.linalg.norm(plan.frozen_ratios.weights - qfix)) if rho > 0 else float("nan")
    rep = coupling_kappa(g, plan.d_fix, plan.d_comp)
    a_max = float(rep.alpha_fix.max())
    if mu is None:
        mu = estimate_mu(F.compose(plan.expansion_matrix()), coll_caps)
    C = _fbar(F, qs) * np.exp(a_max * delta) * (
        _fbar(F, qr) / mu * np.linalg.norm(rep.alpha_fix + rep.alpha_comp) * rep.kappa
        + np.linalg.norm(rep.alpha_fix)
    )
    gap = F.value(qr) - F.value(qs)
    bound = C * delta
    return {
        "C": float(C),
        "bound": float(bound),
        "gap": float(gap),
        "delta": delta,
        "mu": float(mu),
        "kappa": rep.kappa,
        "rho_star": rho,
        "holds": bool(gap <= bound + tol),
    }


def theorem2_bound(truth: GroundTruthModel, d_old: DomainSet, update: DomainUpdate, mu1=None, budget=None, *, tol=1e-6):
    """Explicit reuse-gap bound for an Add update.

    ``(2 Fbar(q*) exp(c_max (1 - rho*)) / mu1) kappa (1 - rho*)`` where
    ``c_max`` is the largest per-task ``|A_fix| + |A_comp|`` and ``mu1`` the
    strong-convexity constant of the objective restricted to the old domains.
    The reused ratios are the pre-update optimum.
    """
    if update.kind is not UpdateKind.ADD:
        raise WrongUpdateKind(f"the reuse-gap bound covers add updates, not {update.kind.value}")
    _check_mu(mu1)
    d_new, unaffected = apply_update(d_old, update)
    g_new = truth.restrict(d_new.ids)
    g_old = truth.restrict(d_old.ids)
    old_caps = None if budget is None else repetition_caps(d_old, budget).values
    new_caps = None if budget is None else repetition_caps(d_new, budget).values
    F_old = g_old.objective()
    F_new = g_new.objective()
    p_tilde = optimum(F_old, d_old.ids, old_caps)
    qs = optimum(F_new, d_new.ids, new_caps).weights
    qfix, rho = _fix_share(qs, d_new.ids, list(d_old.ids))
    rho = min(max(rho, 0.0), 1.0)
    comp = [i for i, _ in update.introduced]
    rep = coupling_kappa(g_new, list(d_old.ids), comp)
    c_max = float(np.max(rep.alpha_fix + rep.alpha_comp))
    if mu1 is None:
        mu1 = estimate_mu(F_old, old_caps)
    gap = float(np.linalg.norm(p_tilde.weights - qfix)) if rho > 0 else float("nan")
    bound = 2.0 * _fbar(F_new, qs) * np.exp(c_max * (1.0 - rho)) / mu1 * rep.kappa * (1.0 - rho)
    return {
        "bound": float(bound),
        "reuse_gap": gap,
        "rho_star": rho,
        "one_minus_rho": 1.0 - rho,
        "mu1": float(mu1),
        "kappa": rep.kappa,
        "holds": bool(gap <= bound + tol),
        "p_tilde": p_tilde,
    }


def caps_slack(q, caps, tol=1e-9) -> bool:
    """True when no cap is active at ``q``."""
    if caps is None:
        return True
    caps = np.asarray(caps)
    q = np.asarray(getattr(q, "weights", q))
    return bool(np.all((caps >= 1.0) | (q < caps - tol)))


def mutual_feasibility(truth: GroundTruthModel, plan: ReusePlan, budget: RepetitionBudget | None):
    """Both the full optimum and the reuse optimum leave every repetition cap slack."""
    ids = plan.post_update.ids
    g = truth.restrict(ids) if truth.ids != ids else truth
    if budget is None:
        return {"full_slack": True, "reuse_slack": True, "holds": True}
    full_caps = repetition_caps(plan.post_update, budget).values
    coll = collapsed_caps(plan, budget)
    qs = optimum(g.objective(), ids, full_caps)
    qr = reuse_optimum(g, plan, coll)
    a = caps_slack(qs, full_caps)
    b = caps_slack(qr, full_caps)
    return {"full_slack": a, "reuse_slack": b, "holds": a and b}

"""Mixture optimisation: exact projected gradient and Dirichlet search.

Both solvers minimise ``f(p) + lam * KL(p || p0)`` over the capped simplex
``{p : sum p = 1, 0 <= p <= caps}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .domains import Mixture
from .errors import InfeasibleCaps, NoFeasibleCandidate, ValidationError
from .objective import Objective

log = logging.getLogger(__name__)

KL_EPS = 1e-12
ARMIJO = 1e-4
MAX_HALVINGS = 60
STALL_LIMIT = 100


@dataclass(frozen=True)
class Exact:
    tol: float = 1e-8
    max_iters: int = 50_000

    def to_dict(self):
        return {"kind": "exact", "tol": self.tol, "max_iters": self.max_iters}


@dataclass(frozen=True)
class Search:
    candidates: int = 512
    rounds: int = 3
    seed: int = 0
    first_concentration: float = 50.0
    concentration: float = 200.0

    def __post_init__(self):
        if self.candidates < 1 or self.rounds < 1:
            raise ValidationError("search needs at least one candidate and one round")

    def to_dict(self):
        return {
            "kind": "search",
            "candidates": self.candidates,
            "rounds": self.rounds,
            "seed": self.seed,
            "first_concentration": self.first_concentration,
            "concentration": self.concentration,
        }


@dataclass(frozen=True)
class SolveSpec:
    """Problem data shared by both solvers.

    ``p0`` is the KL anchor and also fixes the domain ids of the result.
    """

    p0: Mixture
    lam: float = 0.05
    caps: np.ndarray | None = None
    solver: Exact | Search = field(default_factory=Exact)

    def __post_init__(self):
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ValidationError("lambda must be a nonnegative real")
        if self.caps is not None:
            caps = np.asarray(self.caps, dtype=np.float64)
            if caps.shape != (len(self.p0),):
                raise ValidationError("caps length differs from the anchor mixture")
            if np.any(caps < 0):
                raise ValidationError("caps must be nonnegative")
            if caps.sum() < 1.0 - 1e-12:
                raise InfeasibleCaps(f"caps sum to {caps.sum():.6g} < 1")
            object.__setattr__(self, "caps", caps)

    def effective_caps(self) -> np.ndarray:
        """Caps with KL support constraints folded in (p0 = 0 forces p = 0 when lam > 0)."""
        m = len(self.p0)
        caps = np.ones(m) if self.caps is None else np.minimum(self.caps, 1.0)
        if self.lam > 0:
            caps = np.where(self.p0.weights > 0, caps, 0.0)
        if caps.sum() < 1.0 - 1e-12:
            raise InfeasibleCaps(f"caps sum to {caps.sum():.6g} < 1 on the anchor's support")
        return caps

    def to_dict(self):
        return {
            "lam": self.lam,
            "p0": self.p0.as_dict(),
            "caps": None if self.caps is None else self.caps.tolist(),
            "solver": self.solver.to_dict(),
        }


@dataclass
class SolveResult:
    mixture: Mixture
    value: float
    diagnostics: dict

    @property
    def weights(self):
        return self.mixture.weights


def kl(p, q) -> float:
    """KL(p || q) with 0 log 0 = 0 and +inf where p > 0 = q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pos = p > 0
    if np.any(q[pos] <= 0):
        return float("inf")
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def project_capped_simplex(v, caps=None) -> np.ndarray:
    """Euclidean projection onto ``{p : sum p = 1, 0 <= p <= caps}``."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    caps = np.ones_like(v) if caps is None else np.ascontiguousarray(caps, dtype=np.float64)
    if caps.shape != v.shape:
        raise ValidationError("caps and vector lengths differ")
    if caps.sum() < 1.0 - 1e-12:
        raise InfeasibleCaps(f"caps sum to {caps.sum():.6g} < 1")
    return np.asarray(_kernels.project_capped_simplex(v, caps))


def _regularised(objective: Objective, p0w: np.ndarray, lam: float):
    support = p0w > 0
    logp0 = np.where(support, np.log(np.where(support, p0w, 1.0)), 0.0)

    def fg(p):
        """Value, gradient, magnitude of the summed terms (sets the rounding slack)
        and the gradient of the unregularised part."""
        v, g = objective.value_grad(p)
        gf = g
        mag = abs(v)
        if lam > 0:
            ps = np.maximum(p, KL_EPS)
            pos = (p > 0) & support
            lp, l0 = np.log(p[pos]), logp0[pos]
            v = v + lam * float(np.sum(p[pos] * (lp - l0)))
            mag += lam * float(np.sum(p[pos] * (np.abs(lp) + np.abs(l0))))
            g = g + lam * np.where(support, np.log(ps) - logp0 + 1.0, 0.0)
        return v, g, mag, gf

    def batch(P):
        vals = np.asarray(objective.values(P), dtype=np.float64)
        if lam > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                terms = np.where(P > 0, P * (np.log(np.where(P > 0, P, 1.0)) - logp0), 0.0)
            vals = vals + lam * terms.sum(axis=1)
        return vals

    return fg, batch


def solve_exact(objective: Objective, spec: SolveSpec, *, allow_nonconvex=False, x0=None) -> SolveResult:
    """Scaled projected gradient descent with Armijo backtracking.

    Each step projects ``x - H^-1 grad`` onto the capped simplex in the metric
    ``H = mu + lam / x`` (diagonal), where ``mu`` is a Barzilai-Borwein
    curvature estimate of the unregularised part and ``lam / x`` is the KL
    curvature, then backtracks along the segment to the projected point.
    Stops when the Euclidean projected-gradient norm ``||p - P(p - grad)||``
    drops below tol. After 100 consecutive failed line searches the current
    iterate is returned with ``stalled`` set.
    """
    if not isinstance(spec.solver, Exact):
        raise ValidationError("solve_exact needs an Exact solver spec")
    if not objective.convex and not allow_nonconvex:
        raise ValidationError("exact solver requires a convex objective; use search")
    caps = spec.effective_caps()
    lam = spec.lam
    tol, max_iters = spec.solver.tol, spec.solver.max_iters
    fg, _ = _regularised(objective, spec.p0.weights, lam)
    proj = lambda v: np.asarray(_kernels.project_capped_simplex(np.ascontiguousarray(v), caps))
    live = caps > 0
    slack = 8 * np.finfo(float).eps

    x = proj(spec.p0.weights if x0 is None else np.asarray(x0, dtype=np.float64))
    f, g, mag, gf = fg(x)
    mu = 1.0
    stalls = 0
    converged = stalled = False
    pg = np.linalg.norm(x - proj(x - g))
    it = 0
    for it in range(1, max_iters + 1):
        if pg < tol:
            converged = True
            break
        h = mu + (lam / np.maximum(x, KL_EPS) if lam > 0 else 0.0)
        scale = np.where(live, 1.0 / h, 1.0)
        d = np.asarray(_kernels.project_capped_simplex_scaled(np.ascontiguousarray(x - scale * g), caps, scale)) - x
        gd = float(g @ d)
        t = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS):
            xn = x + t * d if t < 1.0 else x + d
            fn, gn, magn, gfn = fg(xn)
            if fn <= f + ARMIJO * t * gd + slack * max(mag, magn):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            stalls += 1
            if stalls >= STALL_LIMIT:
                stalled = True
                break
            mu = min(2.0 * mu, 1e10)
            continue
        stalls = 0
        s, yv = xn - x, gfn - gf
        ss, sy = float(s @ s), float(s @ yv)
        if ss > 0:
            mu = sy / ss if sy > 1e-300 else 0.5 * mu
        mu = min(max(mu, 1e-10), 1e10)
        x, f, g, mag, gf = xn, fn, gn, magn, gfn
        pg = np.linalg.norm(x - proj(x - g))
    else:
        converged = pg < tol
    if stalled:
        log.warning("exact solver stalled after %d iterations (pg=%.3g)", it, pg)
    active = [spec.p0.ids[j] for j in range(len(x)) if caps[j] < 1.0 and x[j] >= caps[j] - 1e-12]
    diag = {
        "solver": "exact",
        "iterations": it,
        "converged": bool(converged),
        "stalled": bool(stalled),
        "pg_norm": float(pg),
        "active_caps": active,
    }
    return SolveResult(Mixture(spec.p0.ids, x, spec.p0.version), float(f), diag)


def solve_search(objective: Objective, spec: SolveSpec) -> SolveResult:
    """Adaptive Dirichlet search.

    Round one samples around ``p0``; later rounds centre on the incumbent. Cap
    violators are discarded before scoring; ties go to the lowest index.
    """
    sc = spec.solver if isinstance(spec.solver, Search) else Search()
    caps = spec.effective_caps()
    support = caps > 0
    _, batch = _regularised(objective, spec.p0.weights, spec.lam)
    rng = np.random.default_rng(sc.seed)
    prior = np.where(support, spec.p0.weights, 0.0)
    if prior.sum() <= 0:
        prior = support / support.sum()
    prior = prior / prior.sum()
    best_x, best_v = None, np.inf
    evaluated = feasible_total = 0
    for rnd in range(sc.rounds):
        conc = sc.first_concentration if rnd == 0 else sc.concentration
        alpha = np.maximum(conc * prior[support], 1e-3)
        G = rng.standard_gamma(np.broadcast_to(alpha, (sc.candidates, alpha.size)))
        G = np.where(G.sum(axis=1, keepdims=True) > 0, G, 1.0)
        P = np.zeros((sc.candidates, len(caps)))
        P[:, support] = G / G.sum(axis=1, keepdims=True)
        ok = np.all(P <= caps + 1e-12, axis=1)
        evaluated += sc.candidates
        feasible_total += int(ok.sum())
        if not ok.any():
            continue
        vals = np.full(sc.candidates, np.inf)
        vals[ok] = batch(P[ok])
        k = int(np.argmin(vals))
        if vals[k] < best_v:
            best_v, best_x = float(vals[k]), P[k].copy()
        prior = best_x
    if best_x is None:
        raise NoFeasibleCandidate(f"all {evaluated} search candidates violated the caps")
    diag = {
        "solver": "search",
        "evaluated": evaluated,
        "feasible": feasible_total,
        "rounds": sc.rounds,
        "active_caps": [spec.p0.ids[j] for j in range(len(caps)) if caps[j] < 1.0 and best_x[j] >= caps[j] - 1e-12],
    }
    return SolveResult(Mixture(spec.p0.ids, best_x, spec.p0.version), best_v, diag)


def solve(objective: Objective, spec: SolveSpec, **kw) -> SolveResult:
    if isinstance(spec.solver, Search):
        return solve_search(objective, spec)
    return solve_exact(objective, spec, **kw)


def objective_value(objective: Objective, p, p0, lam) -> float:
    """``f(p) + lam * KL(p || p0)``."""
    p = np.asarray(p, dtype=np.float64)
    v = objective.value(p)
    return float(v + lam * kl(p, p0)) if lam > 0 else float(v)

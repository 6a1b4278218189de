"""The offline mixing schema: sample a swarm, score it, fit surrogates, solve.

The same routine runs in the full domain space and in collapsed reuse spaces;
the only difference is an ``expand`` map that turns sampled coordinates into
full mixtures before they reach the oracle.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .domains import DomainSet, Mixture, RepetitionBudget, natural_distribution, repetition_caps
from .errors import InfeasibleCaps, ValidationError
from .oracle import GroundTruthModel, SwarmDataset, evaluate_truth
from .optimize import Exact, Search, SolveResult, SolveSpec, solve_exact, solve_search
from .regression import FitConfig, GranularitySpec, ModelSet, aggregate_objective, fit_models
from .swarm import SwarmConfig, sample_weights

log = logging.getLogger(__name__)


class TruthOracle:
    """Scores mixtures with a synthetic ground truth (restricted to the queried ids)."""

    def __init__(self, truth: GroundTruthModel):
        self.truth = truth

    @property
    def tasks(self):
        return self.truth.tasks

    def __call__(self, ids, X, seed) -> np.ndarray:
        g = self.truth if tuple(ids) == self.truth.ids else self.truth.restrict(ids)
        return evaluate_truth(g, X, seed)

    def describe(self):
        return {"kind": "synthetic", "noise_sd": self.truth.noise_sd, "m": self.truth.m, "n": self.truth.n}


@dataclass
class PipelineResult:
    mixture: Mixture
    solve: SolveResult
    models: ModelSet
    swarm: SwarmDataset
    manifest: dict = field(default_factory=dict)


def default_solver(models: ModelSet, solver=None, seed=0):
    """Exact for convex surrogates, search otherwise (GP, BiMix)."""
    if solver is not None:
        return solver
    obj_convex = all(fm.model.convex for fm in models.models)
    return Exact() if obj_convex else Search(seed=seed)


def solve_models(models: ModelSet, p0: Mixture, lam: float, caps, solver=None, seed=0) -> SolveResult:
    obj = aggregate_objective(models)
    solver = default_solver(models, solver, seed)
    spec = SolveSpec(p0, lam, caps, solver)
    if isinstance(solver, Search):
        return solve_search(obj, spec)
    res = solve_exact(obj, spec)
    if res.diagnostics.get("stalled"):
        warnings.warn("exact solver stalled; best iterate returned", RuntimeWarning, stacklevel=2)
    return res


def run_offline(
    space: DomainSet,
    swarm: SwarmConfig | None,
    oracle,
    *,
    fit: FitConfig | None = None,
    granularity: GranularitySpec | None = None,
    lam: float = 0.05,
    caps=None,
    p0: Mixture | None = None,
    solver=None,
    expand=None,
    full_ids=None,
    protect=None,
    extra: SwarmDataset | None = None,
) -> PipelineResult:
    """Sample, score, fit and solve over ``space``.

    ``swarm=None`` skips sampling and fits ``extra`` alone.

    ``expand`` maps a K x dim(space) matrix to full mixtures over
    ``full_ids`` for scoring; identity when omitted. ``extra`` records (already
    scored, over ``space``) are appended to the fresh swarm before fitting.
    """
    fit = fit or FitConfig(seed=0 if swarm is None else swarm.seed)
    p0 = p0 if p0 is not None else natural_distribution(space)
    if caps is not None:
        caps = np.asarray(caps, dtype=np.float64)
        if caps.sum() < 1.0 - 1e-12:
            raise InfeasibleCaps(f"caps sum to {caps.sum():.6g} < 1")
    if swarm is not None and swarm.count > 0:
        tasks = oracle.tasks
        alpha = swarm.concentration * len(space) * swarm.prior_weights(space)
        rng = np.random.default_rng(swarm.seed)
        S = sample_weights(alpha, swarm.count, rng, sparse=swarm.sparse, caps=caps, protect=protect)
        F = S if expand is None else expand(S)
        Y = oracle(full_ids or space.ids, F, swarm.seed + 1)
        data = SwarmDataset(space, tasks, S, Y)
        if extra is not None:
            data = extra.concat(data)
    elif extra is not None:
        data = extra
    else:
        raise ValidationError("no swarm records to fit")
    models = fit_models(data, fit, granularity)
    res = solve_models(models, p0, lam, caps, solver, seed=fit.seed)
    manifest = {
        "space": list(space.ids),
        "swarm": None if swarm is None else swarm.to_dict(),
        "runs": 0 if swarm is None else int(swarm.count),
        "records": int(data.K),
        "fit": fit.to_dict(),
        "granularity": (granularity or GranularitySpec()).to_dict(),
        "lam": lam,
        "solve": res.diagnostics,
        "fit_converged": models.converged,
        "objective": res.value,
    }
    return PipelineResult(res.mixture, res, models, data, manifest)


def olmix_base(
    d: DomainSet,
    swarm: SwarmConfig,
    oracle,
    *,
    fit: FitConfig | None = None,
    granularity: GranularitySpec | None = None,
    lam: float = 0.05,
    budget: RepetitionBudget | None = None,
    solver=None,
    extra: SwarmDataset | None = None,
) -> PipelineResult:
    """Full-space offline mixing: the proposed mixture over every domain of ``d``."""
    caps = None
    if budget is not None:
        caps, feasible = repetition_caps(d, budget)
        if not feasible:
            raise InfeasibleCaps(f"caps sum to {caps.sum():.6g} < 1 under k={budget.k}, R={budget.R}")
    return run_offline(d, swarm, oracle, fit=fit, granularity=granularity, lam=lam, caps=caps,
                       solver=solver, extra=extra)

"""Simulated development cycle: a chain of domain updates handled by one strategy.

Strategies:

* ``full-recompute``: rerun the offline schema on every post-update set.
* ``full-reuse``: freeze every unaffected domain into one virtual domain.
* ``partial-reuse``: freeze unaffected domains per source (``dclm:*``,
  ``stack-edu:*``); single-domain sources and extra ids are recomputed.
* ``swarm-reuse``: keep old runs that remain valid on the new set and top up
  with fresh runs.

``mode="count"`` only does the run accounting. ``mode="truth"`` also scores,
fits and solves against a synthetic truth.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .domains import (
    DomainSet,
    DomainUpdate,
    Mixture,
    RepetitionBudget,
    UpdateKind,
    apply_update,
    natural_distribution,
    repetition_caps,
)
from .errors import ValidationError
from .fixtures import source_of
from .optimize import Search
from .oracle import GroundTruthModel, SwarmDataset
from .pipeline import TruthOracle, olmix_base, run_offline
from .regression import FitConfig
from .reuse import FrozenGroup, ReusePlan, collapsed_caps, collapsed_natural, remap_swarm_matrix, renormalize_remove
from .swarm import SwarmConfig, sample_weights, swarm_schedule

log = logging.getLogger(__name__)

STRATEGIES = ("full-recompute", "full-reuse", "partial-reuse", "swarm-reuse")
DEFAULT_BUDGET = RepetitionBudget(4, 10**12)


@dataclass
class Stage:
    index: int
    label: str
    kind: str
    domains: int
    dimension: int
    runs: int
    cumulative: int
    reused_runs: int = 0
    mixture: Mixture | None = None
    truth_value: float | None = None
    natural_value: float | None = None

    @property
    def improvement(self):
        if self.truth_value is None or not self.natural_value:
            return None
        return (self.natural_value - self.truth_value) / self.natural_value

    def row(self):
        return {
            "stage": self.index,
            "label": self.label,
            "kind": self.kind,
            "domains": self.domains,
            "dimension": self.dimension,
            "runs": self.runs,
            "cumulative_runs": self.cumulative,
            "reused_runs": self.reused_runs,
            "truth_value": self.truth_value,
            "natural_value": self.natural_value,
            "improvement": self.improvement,
        }


def source_groups(d: DomainSet, unaffected, previous: Mixture | None, extra_recompute=()):
    """Partial-reuse plan pieces: one frozen group per multi-domain source of unaffected ids."""
    extra = set(extra_recompute)
    by_source = {}
    for i in unaffected:
        if i not in extra:
            by_source.setdefault(source_of(i), []).append(i)
    groups = []
    frozen = set()
    for s, members in sorted(by_source.items()):
        if len(members) < 2:
            continue
        groups.append(FrozenGroup(s, tuple(members), _ratios(d, members, previous)))
        frozen.update(members)
    comp = tuple(i for i in d.ids if i not in frozen)
    return tuple(groups), comp


def _ratios(d: DomainSet, members, previous: Mixture | None):
    if previous is not None and all(i in previous.ids for i in members):
        w = np.array([previous[i] for i in members])
        if w.sum() > 0:
            return w / w.sum()
    tm = d.token_map()
    w = np.array([tm[i] for i in members], dtype=np.float64)
    return w / w.sum() if w.sum() > 0 else np.full(len(members), 1.0 / len(members))


def _rank(X, tol=None):
    if X.shape[0] == 0:
        return 0
    return int(np.linalg.matrix_rank(X, tol=tol))


class DevCycle:
    def __init__(
        self,
        initial: DomainSet,
        steps,
        strategy: str,
        c: int = 1,
        *,
        mode: str = "count",
        truth: GroundTruthModel | None = None,
        seed: int = 0,
        lam: float = 0.05,
        budget: RepetitionBudget | None = DEFAULT_BUDGET,
        extra_recompute: dict | None = None,
        restarts: int = 8,
    ):
        if strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {strategy!r}")
        if mode not in ("count", "truth"):
            raise ValidationError("mode must be 'count' or 'truth'")
        if mode == "truth" and truth is None:
            raise ValidationError("truth mode needs a ground-truth model")
        self.initial, self.steps = initial, list(steps)
        self.strategy, self.c, self.mode = strategy, int(c), mode
        self.truth, self.seed, self.lam, self.budget = truth, int(seed), lam, budget
        self.extra_recompute = extra_recompute or {}
        self.restarts = restarts
        self.oracle = TruthOracle(truth) if truth is not None else None

    # -- helpers -----------------------------------------------------------

    def _stage_seed(self, k):
        return self.seed * 1000 + k

    def _evaluate(self, q: Mixture, d: DomainSet):
        F = self.truth.restrict(d.ids).noiseless().objective()
        return float(F.value(q.weights)), float(F.value(natural_distribution(d).weights))

    def _swarm_cfg(self, count, k):
        return SwarmConfig(count, None, seed=self._stage_seed(k)) if count > 0 else None

    def _fit_cfg(self, k):
        return FitConfig(seed=self._stage_seed(k), restarts=self.restarts)

    def _solver(self, dim, k):
        return Search(seed=self._stage_seed(k)) if dim == 2 else None

    def _full(self, d, k, extra=None, count=None):
        count = swarm_schedule(len(d), self.c) if count is None else count
        res = olmix_base(d, self._swarm_cfg(count, k), self.oracle, fit=self._fit_cfg(k), lam=self.lam,
                         budget=self.budget, solver=self._solver(len(d), k), extra=extra)
        return res

    def _collapsed(self, plan: ReusePlan, k):
        count = swarm_schedule(plan.dimension, self.c)
        if self.mode == "count":
            return None, count
        E = plan.expansion_matrix()
        caps = collapsed_caps(plan, self.budget) if self.budget is not None else None
        res = run_offline(plan.collapsed_domains(), self._swarm_cfg(count, k), self.oracle, fit=self._fit_cfg(k),
                          lam=self.lam, caps=caps, p0=collapsed_natural(plan), solver=self._solver(plan.dimension, k),
                          expand=lambda S: S @ E.T, full_ids=plan.post_update.ids, protect=plan.virtual_indices())
        return Mixture(plan.post_update.ids, E @ res.mixture.weights, plan.post_update.version), count

    # -- main loop ---------------------------------------------------------

    def run(self) -> list:
        stages = []
        d = self.initial
        count = swarm_schedule(len(d), self.c)
        q, X, Y = None, np.zeros((0, len(d))), None
        if self.mode == "truth":
            res = self._full(d, 0)
            q = res.mixture
            X, Y = res.swarm.X, res.swarm.Y
        elif self.strategy == "swarm-reuse":
            X = self._sample(d, count, 0)
        stages.append(self._record(0, "initial", "initial", d, len(d), count, count, q))
        total = count
        for k, (label, u) in enumerate(self.steps, start=1):
            d_new, unaffected = apply_update(d, u)
            reused = 0
            if self.strategy == "full-recompute":
                dim = len(d_new)
                runs = swarm_schedule(dim, self.c)
                if self.mode == "truth":
                    q = self._full(d_new, k).mixture
            elif self.strategy == "swarm-reuse":
                dim = len(d_new)
                if u.kind in (UpdateKind.REMOVE, UpdateKind.REVISE):
                    warnings.warn(
                        f"stage {k} ({u.kind.value}): old runs touching {list(u.affected)} are discarded; "
                        "the rest are kept",
                        RuntimeWarning,
                        stacklevel=2,
                    )
                Xm, keep = remap_swarm_matrix(X, d, u, d_new, allow_drop=True)
                reused = Xm.shape[0]
                target = swarm_schedule(dim, self.c)
                runs = max(target - reused, dim - _rank(Xm), 0)
                if self.mode == "truth":
                    extra = SwarmDataset(d_new, self.truth.tasks, Xm, Y[keep]) if reused else None
                    res = self._full(d_new, k, extra=extra, count=runs)
                    q = res.mixture
                    X, Y = res.swarm.X, res.swarm.Y
                else:
                    X = np.vstack([Xm, self._sample(d_new, runs, k)]) if runs else Xm
            else:
                plan = self._plan(d_new, unaffected, u, q, k)
                if plan is None:
                    dim, runs = 0, 0
                    if self.mode == "truth":
                        q = renormalize_remove(q, u.affected)
                        q = Mixture(d_new.ids, [q[i] for i in d_new.ids], d_new.version)
                else:
                    dim = plan.dimension
                    q_new, runs = self._collapsed(plan, k)
                    if self.mode == "truth":
                        q = q_new
            total += runs
            stages.append(self._record(k, label, u.kind.value, d_new, dim, runs, total, q, reused))
            d = d_new
        return stages

    def _plan(self, d_new, unaffected, u, q, k):
        if self.strategy == "full-reuse":
            if u.kind is UpdateKind.REMOVE and set(unaffected) == set(d_new.ids):
                return None
            ratios = _ratios(d_new, unaffected, q)
            return ReusePlan(d_new, (FrozenGroup("fix", tuple(unaffected), ratios),),
                             tuple(i for i in d_new.ids if i not in set(unaffected)))
        groups, comp = source_groups(d_new, unaffected, q, self.extra_recompute.get(k, ()))
        if not groups:
            return None
        return ReusePlan(d_new, groups, comp)

    def _sample(self, d, count, k):
        if count <= 0:
            return np.zeros((0, len(d)))
        cfg = SwarmConfig(count, None, seed=self._stage_seed(k))
        alpha = cfg.concentration * len(d) * cfg.prior_weights(d)
        return sample_weights(alpha, count, np.random.default_rng(cfg.seed))

    def _record(self, k, label, kind, d, dim, runs, total, q, reused=0):
        st = Stage(k, label, kind, len(d), dim, runs, total, reused, q)
        if self.mode == "truth" and q is not None:
            st.truth_value, st.natural_value = self._evaluate(q, d)
        return st


def simulate(initial, steps, strategy, c=1, **kw) -> list:
    return DevCycle(initial, steps, strategy, c, **kw).run()


def chain_truth(initial: DomainSet, steps, n_tasks: int = 8, seed: int = 0, noise_sd: float = 0.0) -> GroundTruthModel:
    """Random truth over every id that appears anywhere in the chain."""
    ids = set(initial.ids)
    d = initial
    for _, u in steps:
        d, _ = apply_update(d, u)
        ids.update(d.ids)
    return GroundTruthModel.random(sorted(ids), n_tasks, seed=seed, noise_sd=noise_sd)

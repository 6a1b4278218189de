"""Monte-Carlo audits of the reuse bounds on synthetic noiseless truths.

Each instance is an Add update on a random log-linear truth. For every
budget in the grid the audit records the performance-gap bound, the
reuse-gap bound, the weak / intermediate / optimal reuse gaps and ``rho*``.
"""

from __future__ import annotations

import numpy as np

from .analysis import (
    caps_slack,
    optimum,
    reuse_optimum,
    theorem1_constant,
    theorem2_bound,
)
from .domains import DomainSet, DomainUpdate, Mixture, RepetitionBudget, apply_update, repetition_caps
from .objective import Scaled
from .optimize import Exact, SolveSpec, solve_exact
from .oracle import GroundTruthModel
from .reuse import ReusePlan, collapsed_caps

MONOTONE_TOL = 1e-9


def make_instance(seed: int):
    """Random Add update: 3-6 old domains, 1-3 added, more tasks than domains."""
    rng = np.random.default_rng(seed)
    mf = int(rng.integers(3, 7))
    mc = int(rng.integers(1, 4))
    old = tuple((f"old{j}", int(rng.uniform(1e9, 2e9))) for j in range(mf))
    new = tuple((f"new{j}", int(rng.uniform(2e8, 6e8))) for j in range(mc))
    d_old = DomainSet(old)
    update = DomainUpdate.add(new)
    d_new, _ = apply_update(d_old, update)
    truth = GroundTruthModel.random(d_new.ids, mf + mc + 2, seed=seed)
    return d_old, update, d_new, truth


def default_budgets(d_new: DomainSet):
    total = int(d_new.tokens.sum())
    return {"relaxed": RepetitionBudget(4, max(1, total // 4)), "tight": RepetitionBudget(4, 2 * total)}


def weak_mix(truth: GroundTruthModel, d_new: DomainSet, fix, caps=None) -> Mixture:
    """Ratios over ``fix`` from the objective's maximiser (a deliberately bad reuse choice)."""
    F = truth.restrict(d_new.ids).objective()
    p0 = Mixture(d_new.ids, np.full(len(d_new), 1.0 / len(d_new)))
    worst = solve_exact(Scaled(F, -1.0), SolveSpec(p0, 0.0, caps, Exact(tol=1e-10)), allow_nonconvex=True).mixture
    part = worst.restrict(fix) if sum(worst[i] for i in fix) > 0 else None
    if part is None:
        Ff = truth.restrict(fix).objective()
        pf = Mixture(fix, np.full(len(fix), 1.0 / len(fix)))
        part = solve_exact(Scaled(Ff, -1.0), SolveSpec(pf, 0.0, None, Exact(tol=1e-10)), allow_nonconvex=True).mixture
    return part


def audit_instance(seed: int, budgets=None) -> list:
    """One row per budget with bound audits and the weak/intermediate/optimal gaps."""
    d_old, update, d_new, truth = make_instance(seed)
    fix = list(d_old.ids)
    budgets = budgets or default_budgets(d_new)
    rows = []
    for name, b in budgets.items():
        row = {"seed": seed, "budget": name, "k": b.k, "R": b.R, "m_fix": len(fix), "m_comp": len(update.introduced)}
        full_caps = repetition_caps(d_new, b).values
        old_caps, old_ok = repetition_caps(d_old, b)
        if not old_ok or full_caps.sum() < 1:
            row.update(assumptions=False, diagnosis="caps infeasible")
            rows.append(row)
            continue
        g = truth.restrict(d_new.ids)
        F = g.objective()
        q_star = optimum(F, d_new.ids, full_caps)
        rho = sum(q_star[i] for i in fix)
        t2 = theorem2_bound(truth, d_old, update, budget=b)
        p_opt = q_star.restrict(fix) if rho > 0 else t2["p_tilde"]
        p_tilde = t2["p_tilde"]
        weak = weak_mix(truth, d_new, fix, full_caps)
        inter = Mixture(fix, 0.5 * (weak.weights + p_opt.weights))
        plan = ReusePlan.single(d_new, p_tilde)
        q_reuse = reuse_optimum(g, plan, collapsed_caps(plan, b))
        diagnosis = []
        if rho <= 0:
            diagnosis.append("rho*=0")
        if not caps_slack(q_star, full_caps):
            diagnosis.append("full optimum on a cap")
        if not caps_slack(q_reuse, full_caps):
            diagnosis.append("reuse optimum on a cap")
        t1 = theorem1_constant(truth, plan, budget=b, q_star=q_star, q_reuse=q_reuse)
        gaps = {}
        for label, pt in (("weak", weak), ("intermediate", inter), ("optimal", p_opt)):
            pl = ReusePlan.single(d_new, pt)
            qr = reuse_optimum(g, pl, collapsed_caps(pl, b))
            gaps[label] = float(F.value(qr.weights) - F.value(q_star.weights))
        monotone = gaps["weak"] + MONOTONE_TOL >= gaps["intermediate"] >= gaps["optimal"] - MONOTONE_TOL
        row.update(
            assumptions=not diagnosis,
            diagnosis="; ".join(diagnosis) or "ok",
            rho_star=float(rho),
            one_minus_rho=float(1 - rho),
            thm1_C=t1["C"],
            thm1_bound=t1["bound"],
            thm1_gap=t1["gap"],
            thm1_holds=t1["holds"],
            thm2_bound=t2["bound"],
            thm2_reuse_gap=t2["reuse_gap"],
            thm2_holds=t2["holds"],
            kappa=t1["kappa"],
            mu=t1["mu"],
            mu1=t2["mu1"],
            gap_weak=gaps["weak"],
            gap_intermediate=gaps["intermediate"],
            gap_optimal=gaps["optimal"],
            monotone=bool(monotone),
        )
        rows.append(row)
    return rows


def run_campaign(instances: int = 100, seed: int = 0, budget_name: str = "relaxed", max_attempts: int = 2000):
    """Audit seeds ``seed, seed+1, ...`` until ``instances`` satisfy the assumptions under ``budget_name``.

    Returns ``(accepted rows, all rows)``; every budget's row is kept for
    each attempted seed.
    """
    accepted, every = [], []
    s = seed
    while len(accepted) < instances and s < seed + max_attempts:
        rows = audit_instance(s)
        every.extend(rows)
        for r in rows:
            if r["budget"] == budget_name and r.get("assumptions"):
                accepted.append(r)
        s += 1
    return accepted, every


def summarize(accepted: list, every: list) -> dict:
    by_budget = {}
    for r in every:
        if "one_minus_rho" in r:
            by_budget.setdefault(r["budget"], []).append(r["one_minus_rho"])
    return {
        "instances": len(accepted),
        "thm1_holds": sum(bool(r["thm1_holds"]) for r in accepted),
        "thm2_holds": sum(bool(r["thm2_holds"]) for r in accepted),
        "monotone": sum(bool(r["monotone"]) for r in accepted),
        "mean_one_minus_rho": {k: float(np.mean(v)) for k, v in sorted(by_budget.items())},
        "attempted_seeds": len({r["seed"] for r in every}),
    }

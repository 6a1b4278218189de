"""``mixopt`` command line.

Every command writes its outputs plus ``manifest.json`` into ``--out-dir``.
``mixopt rerun <manifest> --out-dir <dir>`` replays a run and checks that the
outputs are byte-identical.

Exit codes: 0 ok, 1 replay mismatch or internal error, 2 invalid input,
3 infeasible problem, 4 result written but the solver did not converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from contextlib import contextmanager
from itertools import combinations
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, canonical_json, read_json, write_json
from .analysis import coupling_kappa, rank_recompute_candidates, tv_distance
from .devcycle import STRATEGIES, DevCycle, chain_truth
from .domains import DomainSet, DomainUpdate, Mixture, RepetitionBudget, UpdateKind, apply_update, natural_distribution, repetition_caps
from .errors import InfeasibilityError, MixoptError, ValidationError
from .fixtures import CHAIN_EXTRA_RECOMPUTE, published_mixture, update_chain
from .manifest import RunManifest, load_manifest, recording, verify
from .optimize import Exact, Search, SolveSpec, solve_exact, solve_search
from .oracle import GroundTruthModel, SwarmDataset, ingest_results, results_to_csv
from .pipeline import TruthOracle, olmix_base, run_offline
from .regression import FAMILIES, FitConfig, GranularitySpec, ModelSet, aggregate_objective, fit_models, regression_fit_score
from .reuse import collapsed_caps, collapsed_natural, full_reuse_plan, partial_plan, remap_swarm_matrix, renormalize_remove
from .swarm import SwarmConfig, recommended_swarm_size, sample_swarm, swarm_schedule, swarm_to_dict
from .validation import run_campaign, summarize

log = logging.getLogger(__name__)

EXIT_OK, EXIT_MISMATCH, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_NONCONVERGED = 0, 1, 2, 3, 4


class NotConverged(Exception):
    """Raised after outputs are written when the solver stopped short."""


# ---------------------------------------------------------------------------
# output sink
# ---------------------------------------------------------------------------


class Outputs:
    def __init__(self, out_dir: Path, fmt: str, man: RunManifest):
        self.dir, self.fmt, self.man = out_dir, fmt, man

    def _done(self, path):
        self.man.add_output(self.dir, path)
        return path

    def json(self, name, obj):
        return self._done(write_json(self.dir / name, obj))

    def text(self, name, text):
        return self._done(atomic_write_text(self.dir / name, text))

    def table(self, stem, rows, columns=None):
        """Rows as ``<stem>.csv`` or ``<stem>.json`` according to ``--format``."""
        if self.fmt == "json":
            return self.json(f"{stem}.json", rows)
        columns = columns or (list(rows[0]) if rows else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])
        return self.text(f"{stem}.csv", buf.getvalue())

    def mixture(self, stem, q: Mixture):
        self.json(f"{stem}.json", q.to_dict())
        if self.fmt == "csv":
            self.table(stem, [{"domain": i, "weight": w} for i, w in zip(q.ids, q.weights)], ["domain", "weight"])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return str(v)


# ---------------------------------------------------------------------------
# input helpers
# ---------------------------------------------------------------------------


def _load_domains(spec, man: RunManifest) -> DomainSet:
    if spec in ("fixture:initial", "fixture:final"):
        d, steps = update_chain()
        if spec == "fixture:final":
            for _, u in steps:
                d, _ = apply_update(d, u)
        return d
    man.add_input(spec)
    return DomainSet.from_dict(read_json(spec))


def _load_update(path, man) -> DomainUpdate:
    man.add_input(path)
    return DomainUpdate.from_dict(read_json(path))


def _load_truth(path, man) -> GroundTruthModel:
    man.add_input(path)
    return GroundTruthModel.from_dict(read_json(path))


def _oracle(spec, man, domains=None):
    """``synthetic:<truth.json>`` -> TruthOracle; ``results:<csv>`` -> SwarmDataset."""
    kind, _, path = (spec or "").partition(":")
    if kind == "synthetic" and path:
        return TruthOracle(_load_truth(path, man))
    if kind == "results" and path:
        man.add_input(path)
        return ingest_results(path, domains)
    raise ValidationError(f"--oracle must be synthetic:<truth.json> or results:<csv>, got {spec!r}")


def _budget(args):
    if args.R is None:
        return None
    return RepetitionBudget(args.k, args.R)


def _granularity(args, man):
    if args.granularity != "per-family":
        return GranularitySpec(args.granularity)
    if not args.families:
        raise ValidationError("--granularity per-family needs --families <json task->family map>")
    man.add_input(args.families)
    return GranularitySpec("per-family", read_json(args.families))


def _fit_cfg(args):
    return FitConfig(args.family, restarts=args.restarts, seed=args.seed, R=args.R)


def _solver(args):
    if args.solver == "exact":
        return Exact()
    if args.solver == "search":
        return Search(seed=args.seed)
    return None


def _swarm_size(args, m):
    if args.swarm_size is not None:
        return args.swarm_size
    return recommended_swarm_size(m, args.c)


def _check_solve(diag):
    if diag.get("solver") == "exact" and not diag.get("converged"):
        raise NotConverged(f"exact solver stopped after {diag.get('iterations')} iterations (pg={diag.get('pg_norm')})")


def _solve_report(res, caps):
    return {
        "objective": res.value,
        "diagnostics": res.diagnostics,
        "caps": None if caps is None else dict(zip(res.mixture.ids, np.asarray(caps).tolist())),
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_base(args, out: Outputs):
    man = out.man
    budget = _budget(args)
    fit, gran, solver = _fit_cfg(args), _granularity(args, man), _solver(args)
    if args.oracle.startswith("results:"):
        d = _load_domains(args.domains, man) if args.domains else None
        data = _oracle(args.oracle, man, d)
        d = data.domains
        caps = None
        if budget is not None:
            caps, ok = repetition_caps(d, budget)
            if not ok:
                raise InfeasibilityError(f"caps sum to {caps.sum():.6g} < 1 under k={budget.k}, R={budget.R}")
        res = run_offline(d, None, None, fit=fit, granularity=gran, lam=args.lam, caps=caps, solver=solver, extra=data)
        swarm = None
    else:
        if not args.domains:
            raise ValidationError("--domains is required with a synthetic oracle")
        d = _load_domains(args.domains, man)
        oracle = _oracle(args.oracle, man)
        swarm = SwarmConfig(_swarm_size(args, len(d)), args.prior, args.concentration, args.sparse, budget, args.seed)
        res = olmix_base(d, swarm, oracle, fit=fit, granularity=gran, lam=args.lam, budget=budget, solver=solver)
        caps = None if budget is None else repetition_caps(d, budget).values
        if args.swarm_out:
            out.json(args.swarm_out, swarm_to_dict(d, swarm, [Mixture.over(d, x) for x in res.swarm.X]))
    out.json("domains.json", d.to_dict())
    out.mixture("mixture", res.mixture)
    out.json("models.json", res.models.to_dict())
    out.text("swarm.csv", results_to_csv(res.swarm))
    out.json("solve.json", _solve_report(res.solve, caps))
    entry = {"step": 0, "strategy": "base", "update": None, "plan": None, "runs": res.manifest["runs"],
             "swarm": swarm.to_dict() if swarm else None, "fit": fit.to_dict(), "lam": args.lam,
             "mixture": res.mixture.as_dict(), "diagnostics": res.solve.diagnostics}
    out.json("chain.json", [entry])
    print(f"proposed mixture over {len(d)} domains, objective {res.solve.value:.6g}")
    _check_solve(res.solve.diagnostics)


def cmd_sample(args, out: Outputs):
    d = _load_domains(args.domains, out.man)
    cfg = SwarmConfig(_swarm_size(args, len(d)), args.prior, args.concentration, args.sparse, _budget(args), args.seed)
    mixes = sample_swarm(d, cfg)
    out.json(args.swarm_out or "swarm.json", swarm_to_dict(d, cfg, mixes))
    if out.fmt == "csv":
        out.table("swarm", [{f"mix:{i}": w for i, w in zip(q.ids, q.weights)} for q in mixes],
                  [f"mix:{i}" for i in d.ids])
    print(f"sampled {cfg.count} mixtures over {len(d)} domains")


def cmd_fit(args, out: Outputs):
    man = out.man
    d = _load_domains(args.domains, man) if args.domains else None
    man.add_input(args.results)
    data = ingest_results(args.results, d)
    models = fit_models(data, _fit_cfg(args), _granularity(args, man))
    out.json("models.json", models.to_dict())
    rows = [dict(unit=fm.task, family=fm.model.family, weight=fm.weight, **fm.diagnostics) for fm in models.models]
    if args.holdout:
        man.add_input(args.holdout)
        score = regression_fit_score(models, ingest_results(args.holdout, data.domains))
        out.json("score.json", {"fit_score": score})
    out.table("fit", rows)
    print(f"fitted {len(models.models)} model(s) on {data.K} records")


def _p0_from(spec_obj, ids, d):
    p0 = spec_obj.get("p0", "natural")
    if p0 == "uniform":
        return Mixture(ids, np.full(len(ids), 1.0 / len(ids)))
    if p0 == "natural":
        if d is None:
            raise ValidationError("a natural anchor needs --domains")
        return natural_distribution(d)
    q = Mixture.from_dict({"weights": p0} if "weights" not in p0 else p0)
    return q.restrict(ids)


def cmd_optimize(args, out: Outputs):
    man = out.man
    man.add_input(args.models)
    models = ModelSet.from_dict(read_json(args.models))
    spec_obj = {}
    if args.spec:
        man.add_input(args.spec)
        spec_obj = read_json(args.spec)
    d = _load_domains(args.domains, man) if args.domains else None
    if d is not None and d.ids != tuple(models.ids):
        raise ValidationError("--domains does not match the fitted models' domains")
    p0 = _p0_from(spec_obj, models.ids, d)
    caps = None
    if "budget" in spec_obj:
        if d is None:
            raise ValidationError("a budget needs --domains for token counts")
        b = spec_obj["budget"]
        caps, ok = repetition_caps(d, RepetitionBudget(int(b["k"]), int(b["R"])))
        if not ok:
            raise InfeasibilityError(f"caps sum to {caps.sum():.6g} < 1")
    elif "caps" in spec_obj:
        caps = np.array([float(spec_obj["caps"][i]) for i in models.ids])
    sv = dict(spec_obj.get("solver", {}))
    kind = sv.pop("kind", None)
    obj = aggregate_objective(models)
    if kind is None:
        kind = "exact" if obj.convex else "search"
    lam = float(spec_obj.get("lam", args.lam))
    if kind == "exact":
        res = solve_exact(obj, SolveSpec(p0, lam, caps, Exact(**sv)))
    elif kind == "search":
        sv.setdefault("seed", args.seed)
        res = solve_search(obj, SolveSpec(p0, lam, caps, Search(**sv)))
    else:
        raise ValidationError(f"unknown solver kind {kind!r}")
    out.mixture("mixture", res.mixture)
    out.json(args.out or "solution.json", {"mixture": res.mixture.as_dict(), **_solve_report(res, caps),
                                           "active_caps": res.diagnostics.get("active_caps", [])})
    print(f"objective {res.value:.6g} ({res.diagnostics.get('solver')})")
    _check_solve(res.diagnostics)


def _chain_state(chain_dir, man):
    chain_dir = Path(chain_dir)
    paths = {k: chain_dir / f for k, f in (("domains", "domains.json"), ("mixture", "mixture.json"),
                                           ("chain", "chain.json"), ("swarm", "swarm.csv"))}
    for k in ("domains", "mixture"):
        if not paths[k].exists():
            raise ValidationError(f"chain directory lacks {paths[k].name}")
    for p in paths.values():
        if p.exists():
            man.add_input(p)
    d = DomainSet.from_dict(read_json(paths["domains"]))
    q = Mixture.from_dict(read_json(paths["mixture"]), d)
    chain = read_json(paths["chain"]) if paths["chain"].exists() else []
    swarm = ingest_results(paths["swarm"], d) if paths["swarm"].exists() else None
    return d, q, chain, swarm


def _full_space_swarm(res, E, d_new):
    X = res.swarm.X if E is None else res.swarm.X @ E.T
    return SwarmDataset(d_new, res.swarm.tasks, X, res.swarm.Y)


def cmd_reuse(args, out: Outputs):
    man = out.man
    d_old, q_old, chain, old_swarm = _chain_state(args.chain, man)
    update = _load_update(args.update, man)
    oracle = _oracle(args.oracle, man)
    if not isinstance(oracle, TruthOracle):
        raise ValidationError("reuse draws fresh runs; it needs a synthetic oracle")
    d_new, unaffected = apply_update(d_old, update)
    strategy, _, partial_ids = args.strategy.partition(":")
    budget, fit, gran, solver = _budget(args), _fit_cfg(args), _granularity(args, man), _solver(args)
    kw = dict(fit=fit, granularity=gran, lam=args.lam, solver=solver)
    plan = None
    reused = 0
    swarm_cfg = None
    res = None

    def cfg(count):
        return SwarmConfig(count, args.prior, args.concentration, args.sparse, budget, args.seed) if count > 0 else None

    if strategy == "full-recompute":
        swarm_cfg = cfg(_swarm_size(args, len(d_new)))
        res = olmix_base(d_new, swarm_cfg, oracle, budget=budget, **kw)
        q, full_swarm = res.mixture, res.swarm
    elif strategy == "swarm-reuse":
        if old_swarm is None:
            raise ValidationError("swarm reuse needs swarm.csv in the chain directory")
        if update.kind in (UpdateKind.REMOVE, UpdateKind.REVISE):
            log.warning("%s update: old runs touching %s are discarded; the rest are kept",
                        update.kind.value, list(update.affected))
        Xm, keep = remap_swarm_matrix(old_swarm.X, d_old, update, d_new, allow_drop=True)
        reused = Xm.shape[0]
        extra = SwarmDataset(d_new, old_swarm.tasks, Xm, old_swarm.Y[keep]) if reused else None
        target = _swarm_size(args, len(d_new))
        rank = int(np.linalg.matrix_rank(Xm)) if reused else 0
        swarm_cfg = cfg(max(target - reused, len(d_new) - rank, 0))
        res = olmix_base(d_new, swarm_cfg, oracle, budget=budget, extra=extra, **kw)
        q, full_swarm = res.mixture, res.swarm
    elif strategy in ("full-reuse", "partial-reuse"):
        if strategy == "full-reuse":
            _, plan = full_reuse_plan(d_old, update, q_old)
        else:
            ids = [i for i in partial_ids.split(",") if i]
            bad = sorted(set(ids) - set(unaffected))
            if not ids or bad:
                raise ValidationError(f"partial-reuse:<ids> must list unaffected domains; bad: {bad or 'none given'}")
            plan = partial_plan(d_new, q_old, ids)
        if plan is None:
            q = renormalize_remove(q_old, update.affected)
            q = Mixture(d_new.ids, [q[i] for i in d_new.ids], d_new.version)
            full_swarm = None
        else:
            E = plan.expansion_matrix()
            caps = collapsed_caps(plan, budget) if budget is not None else None
            swarm_cfg = cfg(_swarm_size(args, plan.dimension))
            res = run_offline(plan.collapsed_domains(), swarm_cfg, oracle, caps=caps, p0=collapsed_natural(plan),
                              expand=lambda S: S @ E.T, full_ids=d_new.ids, protect=plan.virtual_indices(), **kw)
            q = Mixture(d_new.ids, E @ res.mixture.weights, d_new.version)
            full_swarm = _full_space_swarm(res, E, d_new)
    else:
        raise ValidationError(f"unknown strategy {args.strategy!r}")

    out.json("domains.json", d_new.to_dict())
    out.mixture("mixture", q)
    if full_swarm is not None:
        out.text("swarm.csv", results_to_csv(full_swarm))
    if res is not None:
        out.json("models.json", res.models.to_dict())
        out.json("solve.json", _solve_report(res.solve, None))
    entry = {
        "step": len(chain),
        "strategy": args.strategy,
        "update": update.to_dict(),
        "plan": None if plan is None else plan.to_dict(),
        "runs": 0 if swarm_cfg is None else int(swarm_cfg.count),
        "reused_runs": reused,
        "swarm": None if swarm_cfg is None else swarm_cfg.to_dict(),
        "fit": fit.to_dict(),
        "lam": args.lam,
        "mixture": q.as_dict(),
        "diagnostics": None if res is None else res.solve.diagnostics,
    }
    out.json("chain.json", list(chain) + [entry])
    print(f"{args.strategy}: {entry['runs']} new runs, {len(d_new)} domains")
    if res is not None:
        _check_solve(res.solve.diagnostics)


def _load_script(path, man):
    if path is None:
        initial, steps = update_chain()
        return initial, steps, CHAIN_EXTRA_RECOMPUTE
    man.add_input(path)
    obj = read_json(path)
    try:
        initial = DomainSet.from_dict(obj["initial"])
        steps = [(s.get("label", f"step {k + 1}"), DomainUpdate.from_dict(s["update"])) for k, s in enumerate(obj["steps"])]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad update script: {exc}") from None
    extra = {int(k): tuple(v) for k, v in obj.get("extra_recompute", {}).items()}
    return initial, steps, extra


def cmd_simulate(args, out: Outputs):
    man = out.man
    initial, steps, extra = _load_script(args.script, man)
    truth = None
    if args.mode == "truth":
        truth = _load_truth(args.truth, man) if args.truth else chain_truth(initial, steps, args.tasks, args.seed, args.noise_sd)
    budget = _budget(args) or RepetitionBudget(4, 10**12)
    sim = DevCycle(initial, steps, args.strategy, args.c, mode=args.mode, truth=truth, seed=args.seed, lam=args.lam,
                   budget=budget, extra_recompute=extra, restarts=args.restarts)
    stages = sim.run()
    out.table("frontier", [s.row() for s in stages])
    if args.mode == "truth":
        out.json("mixtures.json", [{"stage": s.index, "label": s.label, "mixture": s.mixture.as_dict()} for s in stages])
    print(f"{args.strategy} c={args.c}: {stages[-1].cumulative} cumulative runs over {len(stages)} stages")


def cmd_validate(args, out: Outputs):
    accepted, every = run_campaign(args.instances, args.seed, args.budget)
    cols = sorted({k for r in every for k in r})
    out.table("audit", every, cols)
    summary = summarize(accepted, every)
    out.json("summary.json", summary)
    print(f"{summary['instances']} instances: bound 1 held {summary['thm1_holds']}, bound 2 held "
          f"{summary['thm2_holds']}, monotone {summary['monotone']}")


def _load_mixture(spec, man):
    if spec.startswith("published:"):
        return published_mixture(spec.split(":", 1)[1])
    man.add_input(spec)
    obj = read_json(spec)
    return Mixture.from_dict(obj if "weights" in obj else {"weights": obj})


def cmd_tv(args, out: Outputs):
    mixes = [(s, _load_mixture(s, out.man)) for s in args.mixtures]
    if len(mixes) < 2:
        raise ValidationError("tv needs at least two mixtures")
    rows = [{"a": a, "b": b, "tv": tv_distance(p, q)} for (a, p), (b, q) in combinations(mixes, 2)]
    out.table("tv", rows, ["a", "b", "tv"])
    for r in rows:
        print(f"{r['a']} vs {r['b']}: {r['tv']:.4f}")


def cmd_kappa(args, out: Outputs):
    man = out.man
    if bool(args.models) == bool(args.truth):
        raise ValidationError("give exactly one of --models and --truth")
    if args.models:
        man.add_input(args.models)
        src = ModelSet.from_dict(read_json(args.models))
        ids = src.ids
    else:
        src = _load_truth(args.truth, man)
        ids = src.ids
    affected = [i for i in args.affected.split(",") if i]
    unaffected = [i for i in args.unaffected.split(",") if i] if args.unaffected else [i for i in ids if i not in affected]
    base = coupling_kappa(src, unaffected, affected)
    ranking = rank_recompute_candidates(src, unaffected, affected)
    rows = [{"rank": k + 1, "domain": d, "kappa_after": ka, "delta_kappa": dk} for k, (d, ka, dk) in enumerate(ranking)]
    out.json("kappa.json", {"kappa": base.kappa, "affected": affected, "unaffected": unaffected, **base.to_dict()})
    out.table("ranking", rows, ["rank", "domain", "kappa_after", "delta_kappa"])
    print(f"kappa {base.kappa:.6g}; top candidate {rows[0]['domain'] if rows else '-'}")


def cmd_truth(args, out: Outputs):
    d = _load_domains(args.domains, out.man)
    g = GroundTruthModel.random(d.ids, args.tasks, seed=args.seed, noise_sd=args.noise_sd)
    out.json("truth.json", g.to_dict())
    print(f"truth over {g.m} domains and {g.n} tasks")


COMMANDS = {
    "base": cmd_base,
    "sample": cmd_sample,
    "fit": cmd_fit,
    "optimize": cmd_optimize,
    "reuse": cmd_reuse,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "tv": cmd_tv,
    "kappa": cmd_kappa,
    "truth": cmd_truth,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="mixopt-out")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _swarm_args(p):
    p.add_argument("--swarm-size", type=int, help="K; default c(m+1)")
    p.add_argument("--c", type=int, default=3, help="swarm-size multiplier")
    p.add_argument("--prior", choices=("natural", "uniform"), default="natural")
    p.add_argument("--concentration", type=float, default=1.0)
    p.add_argument("--sparse", type=float, help="clip weights below this threshold")


def _budget_args(p):
    p.add_argument("--k", type=int, default=4, help="max repetitions per domain")
    p.add_argument("--R", type=int, help="target token budget; caps off when omitted")


def _fit_args(p):
    p.add_argument("--family", choices=sorted(FAMILIES), default="loglinear")
    p.add_argument("--granularity", choices=("per-task", "per-family", "aggregated"), default="per-task")
    p.add_argument("--families", help="JSON task -> family map for per-family granularity")
    p.add_argument("--restarts", type=int, default=8)


def _solve_args(p):
    p.add_argument("--lam", type=float, default=0.05, help="KL weight")
    p.add_argument("--solver", choices=("auto", "exact", "search"), default="auto")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="mixopt", description="Data-mixture optimisation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("base", parents=[common], help="sample, score, fit and solve from scratch")
    p.add_argument("--domains", help="DomainSet JSON or fixture:initial|fixture:final")
    p.add_argument("--oracle", required=True, help="synthetic:<truth.json> or results:<csv>")
    p.add_argument("--swarm-out", help="also write the swarm manifest (relative to --out-dir)")
    _swarm_args(p), _budget_args(p), _fit_args(p), _solve_args(p)

    p = sub.add_parser("sample", parents=[common], help="draw a swarm of mixtures")
    p.add_argument("--domains", required=True)
    p.add_argument("--swarm-out", help="swarm file name (relative to --out-dir)")
    _swarm_args(p), _budget_args(p)

    p = sub.add_parser("fit", parents=[common], help="fit surrogates to a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--domains")
    p.add_argument("--holdout", help="results CSV for the fit score")
    p.add_argument("--R", type=float, help="token budget for the autoscale family")
    _fit_args(p)

    p = sub.add_parser("optimize", parents=[common], help="solve for a mixture on fitted models")
    p.add_argument("--models", required=True)
    p.add_argument("--spec", help="JSON: lam, p0, budget|caps, solver")
    p.add_argument("--domains")
    p.add_argument("--out", help="solution file name (relative to --out-dir)")
    p.add_argument("--lam", type=float, default=0.05)

    p = sub.add_parser("reuse", parents=[common], help="apply one update to a chain directory")
    p.add_argument("--chain", required=True, help="directory from base or an earlier reuse")
    p.add_argument("--update", required=True)
    p.add_argument("--strategy", required=True,
                   help="full-recompute | full-reuse | partial-reuse:<id,id,...> | swarm-reuse")
    p.add_argument("--oracle", required=True)
    _swarm_args(p), _budget_args(p), _fit_args(p), _solve_args(p)

    p = sub.add_parser("simulate", parents=[common], help="run a development cycle of updates")
    p.add_argument("--script", help="update-chain JSON; defaults to the built-in five-update chain")
    p.add_argument("--strategy", choices=STRATEGIES, required=True)
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--mode", choices=("count", "truth"), default="count")
    p.add_argument("--truth", help="truth JSON covering every id in the chain")
    p.add_argument("--tasks", type=int, default=8)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--lam", type=float, default=0.05)
    p.add_argument("--restarts", type=int, default=8)
    _budget_args(p)

    p = sub.add_parser("validate", parents=[common], help="Monte-Carlo audit of the reuse bounds")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--budget", choices=("relaxed", "tight"), default="relaxed")

    p = sub.add_parser("tv", parents=[common], help="pairwise total-variation distances")
    p.add_argument("mixtures", nargs="+", help="mixture JSON files or published:<name>")

    p = sub.add_parser("kappa", parents=[common], help="coupling and recompute-candidate ranking")
    p.add_argument("--models")
    p.add_argument("--truth")
    p.add_argument("--affected", required=True, help="comma-separated affected ids")
    p.add_argument("--unaffected", help="comma-separated; default every other id")

    p = sub.add_parser("truth", parents=[common], help="write a random synthetic truth")
    p.add_argument("--domains", required=True)
    p.add_argument("--tasks", type=int, default=8)
    p.add_argument("--noise-sd", type=float, default=0.0)

    p = sub.add_parser("rerun", help="replay a manifest and compare outputs byte for byte")
    p.add_argument("manifest")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("verify", help="check a manifest's recorded digests")
    p.add_argument("manifest")
    p.add_argument("--skip-inputs", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def _strip_out_dir(argv):
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--out-dir":
            skip = True
        elif not a.startswith("--out-dir="):
            out.append(a)
    return out


@contextmanager
def _cwd(path):
    prev = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(prev)


def _run(args, argv) -> int:
    out_dir = Path(args.out_dir)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("out_dir", "verbose")}
    man = RunManifest.start(args.command, _strip_out_dir(argv), config, {"seed": args.seed})
    out = Outputs(out_dir, args.format, man)
    code = EXIT_OK
    try:
        with recording(man):
            COMMANDS[args.command](args, out)
    except NotConverged as exc:
        print(f"warning: {exc}", file=sys.stderr)
        man.warnings.append(str(exc))
        code = EXIT_NONCONVERGED
    except InfeasibilityError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        man.warnings.append(f"{type(exc).__name__}: {exc}")
        code = EXIT_INFEASIBLE
    except ValidationError as exc:
        print(f"invalid input: {type(exc).__name__}: {exc}", file=sys.stderr)
        man.warnings.append(f"{type(exc).__name__}: {exc}")
        code = EXIT_INVALID
    except MixoptError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        man.warnings.append(f"{type(exc).__name__}: {exc}")
        code = EXIT_MISMATCH
    man.exit_code = code
    out_dir.mkdir(parents=True, exist_ok=True)
    man.write(out_dir)
    return code


def rerun(manifest_path, out_dir) -> int:
    """Replay ``manifest_path`` into ``out_dir``; 0 when every output matches byte for byte."""
    man = load_manifest(manifest_path)
    out_dir = Path(out_dir).resolve()
    with _cwd(man.cwd):
        code = main(list(man.argv) + ["--out-dir", str(out_dir)])
    if code != man.exit_code:
        print(f"exit code {code} differs from recorded {man.exit_code}", file=sys.stderr)
        return EXIT_MISMATCH
    fresh = load_manifest(out_dir)
    diff = sorted(set(man.outputs.items()) ^ set(fresh.outputs.items()))
    if diff:
        names = sorted({k for k, _ in diff})
        print("outputs differ: " + ", ".join(names), file=sys.stderr)
        return EXIT_MISMATCH
    print(f"{len(man.outputs)} outputs identical")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "rerun":
        return rerun(args.manifest, args.out_dir)
    if args.command == "verify":
        try:
            verify(args.manifest, check_inputs=not args.skip_inputs)
        except ValidationError as exc:
            print(str(exc), file=sys.stderr)
            return EXIT_INVALID
        print("manifest intact")
        return EXIT_OK
    return _run(args, argv)


if __name__ == "__main__":
    sys.exit(main())

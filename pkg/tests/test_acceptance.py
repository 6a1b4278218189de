"""Top-level acceptance criteria; each test prints one PASS/FAIL line in the summary."""

import json
import warnings
from contextlib import contextmanager

import numpy as np
import pytest

from mixopt.analysis import gap_report, optimum, rank_recompute_candidates, theorem2_bound, tv_distance
from mixopt.cli import main
from mixopt.devcycle import simulate
from mixopt.domains import DomainSet, DomainUpdate, Mixture, RepetitionBudget, apply_update, natural_distribution
from mixopt.fixtures import CHAIN_EXTRA_RECOMPUTE, published_mixture, update_chain
from mixopt.manifest import MANIFEST_NAME
from mixopt.objective import LogLinearObjective
from mixopt.optimize import Search, SolveSpec, objective_value, project_capped_simplex, solve_exact, solve_search
from mixopt.oracle import GroundTruthModel, oracle_dataset, truth_optimum
from mixopt.pipeline import TruthOracle, olmix_base
from mixopt.regression import fit_models, regression_fit_score
from mixopt.reuse import (
    CollapsedMixture,
    ReusePlan,
    collapse,
    expand,
    full_mix_reuse,
    partial_mix_reuse,
    partial_plan,
    renormalize_remove,
)
from mixopt.swarm import SwarmConfig, recommended_swarm_size
from mixopt.validation import run_campaign, summarize

from oracles import grid_argmin, kl_terms, loglinear_mean, project_breakpoints, tv

RESULTS = []


@contextmanager
def criterion(num, name):
    try:
        yield
    except BaseException:
        RESULTS.append((num, name, False))
        raise
    RESULTS.append((num, name, True))


def test_c01_expansion_fixtures():
    with criterion(1, "expansion fixtures"):
        d = DomainSet((("a", 100), ("b", 100), ("c", 200), ("n", 300)))
        plan = ReusePlan.single(d, Mixture(("a", "b", "c"), (0.25, 0.25, 0.5)))
        q = expand(plan, CollapsedMixture([0.4], [0.6]))
        assert np.max(np.abs(q.weights - [0.1, 0.1, 0.2, 0.6])) <= 1e-9
        r, res = collapse(plan, q)
        assert abs(r.virtual[0] - 0.4) <= 1e-9 and res <= 1e-9

        rem = renormalize_remove(Mixture(("a", "b", "c"), (0.25, 0.25, 0.5)), ["a"])
        assert np.max(np.abs(rem.weights - [1 / 3, 2 / 3])) <= 1e-9

        d = DomainSet((("u1", 1), ("u2", 2), ("x1", 1), ("x2", 3)))
        plan = ReusePlan.single(d, Mixture(("u1", "u2"), (0.33, 0.67)))
        got = expand(plan, CollapsedMixture([0.6], [0.1, 0.3])).as_dict()
        want = {"u1": 0.198, "u2": 0.402, "x1": 0.1, "x2": 0.3}
        assert max(abs(got[k] - v) for k, v in want.items()) <= 1e-9

        d = DomainSet((("a", 1), ("b", 2), ("r", 3)))
        plan = ReusePlan.single(d, Mixture(("a", "b"), (0.33, 0.67)))
        got = expand(plan, CollapsedMixture([0.4], [0.6])).weights
        assert np.max(np.abs(got - [0.132, 0.268, 0.6])) <= 1e-9


def test_c02_tv_from_published_mixtures():
    with criterion(2, "TV reproduction from published mixtures"):
        part, full, nat = (published_mixture(n) for n in ("partial_reuse", "full_recompute", "natural"))
        pf, pn = tv_distance(part, full), tv_distance(part, nat)
        assert abs(pf - 0.067) <= 0.005, f"TV(partial, full) = {pf:.4f}"
        assert abs(pn - 0.127) <= 0.005, f"TV(partial, natural) = {pn:.4f}"


def test_c03_run_counts():
    with criterion(3, "run-count accounting"):
        initial, steps = update_chain()
        want = {
            ("full-recompute", 1): 267, ("full-recompute", 2): 416, ("full-recompute", 3): 832,
            ("full-reuse", 1): 76, ("full-reuse", 2): 108, ("full-reuse", 3): 216,
            ("partial-reuse", 3): 272,
            ("swarm-reuse", 1): 77, ("swarm-reuse", 2): 140, ("swarm-reuse", 3): 268,
        }
        got = {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for (strategy, c) in want:
                stages = simulate(initial, steps, strategy, c, extra_recompute=CHAIN_EXTRA_RECOMPUTE)
                got[strategy, c] = stages[-1].cumulative
        assert got == want


def test_c04_fit_recovery():
    with criterion(4, "fit recovery"):
        for m in (4, 6, 12):
            d = DomainSet(tuple((f"d{j:02d}", 1000 * (j + 1)) for j in range(m)))
            for n in (3, 8):
                g = GroundTruthModel.random(d.ids, n, seed=10 * m + n)
                rng = np.random.default_rng(m * n)
                ds = oracle_dataset(g, d, rng.dirichlet(np.ones(m), size=3 * (m + 1)))
                ms = fit_models(ds)
                P = rng.dirichlet(np.ones(m), size=100)
                truth = np.column_stack([g.c[i] + np.exp(P @ g.A[i]) for i in range(n)])
                err = np.max(np.abs(ms.predict_tasks(P) - truth))
                assert err <= 1e-5, f"m={m} n={n} max error {err:.2e}"
                hold = oracle_dataset(g, d, rng.dirichlet(np.ones(m), size=50))
                assert regression_fit_score(ms, hold) >= 0.999


def test_c05_solver_optimality():
    with criterion(5, "solver optimality"):
        rng = np.random.default_rng(2024)
        for k in range(50):
            m = int(rng.integers(2, 4))
            lam = (0.0, 0.05)[k % 2]
            c, A = rng.uniform(0.2, 1.0, 3), rng.normal(size=(3, m))
            p0 = rng.dirichlet(np.ones(m) * 2)
            caps = None
            if (k // 2) % 2:
                # binding for some coordinates but never excluding the anchor
                caps = np.minimum(1.0, np.maximum(rng.uniform(0.2, 0.9, m), 1.2 * p0))
            ids = tuple(f"d{j}" for j in range(m))
            spec = SolveSpec(Mixture(ids, p0), lam, caps)
            F = LogLinearObjective(c, A)
            ex = solve_exact(F, spec)
            q = grid_argmin(c, A, lam, p0, caps)
            assert tv(ex.weights, q) <= 0.02, f"instance {k}: TV {tv(ex.weights, q):.4f}"
            grid_val = loglinear_mean(c, A, q)[0] + lam * kl_terms(q, p0)[0]
            assert ex.value <= grid_val + 1e-9
            se = solve_search(F, SolveSpec(Mixture(ids, p0), lam, caps, Search(seed=k)))
            assert ex.value <= se.value + 1e-9
        for k in range(200):
            m = int(rng.integers(2, 12))
            caps = rng.uniform(0.05, 1.0, m)
            if caps.sum() < 1:
                caps = caps / caps.sum() * 1.1
            caps = np.minimum(caps, 1.0)
            v = rng.normal(scale=2.0, size=m)
            assert np.max(np.abs(project_capped_simplex(v, caps) - project_breakpoints(v, caps))) <= 1e-6


def test_c06_sample_complexity_trend():
    with criterion(6, "sample-complexity trend"):
        lam = 0.05
        for m in (6, 12):
            d = DomainSet(tuple((f"d{j:02d}", 1000 * (j + 1)) for j in range(m)))
            p0 = natural_distribution(d)
            medians = []
            for c in range(1, 6):
                gaps = []
                for s in range(3):
                    g = GroundTruthModel.random(d.ids, 8, seed=100 + s, noise_sd=0.01)
                    clean = GroundTruthModel(g.ids, g.tasks, g.c, g.A)
                    best = truth_optimum(clean, lam=lam, p0=p0)
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        res = olmix_base(d, SwarmConfig(recommended_swarm_size(m, c), seed=s), TruthOracle(g), lam=lam)
                    value = lambda q: objective_value(clean.objective(), q.weights, p0.weights, lam)  # noqa: E731
                    gaps.append(value(res.mixture) - value(best))
                medians.append(float(np.median(gaps)))
            assert all(b <= a for a, b in zip(medians, medians[1:])), f"m={m}: {medians}"
            assert medians[2] <= 0.2 * medians[0], f"m={m}: {medians}"


def test_c07_reuse_exactness():
    with criterion(7, "reuse exactness"):
        d_old = DomainSet(tuple((f"o{j}", 1000) for j in range(4)))
        upd = DomainUpdate.add((("n0", 500), ("n1", 500)))
        d_new, unaffected = apply_update(d_old, upd)
        g = GroundTruthModel.random(d_new.ids, 6, seed=14)
        q = truth_optimum(g)
        plan = ReusePlan.single(d_new, q.restrict(tuple(unaffected)))
        out, _, _ = full_mix_reuse(plan, SwarmConfig(3 * (plan.dimension + 1), seed=0), TruthOracle(g), lam=0.0)
        assert tv_distance(out, q) <= 0.02

        # a one-token added domain is capped at (almost) zero weight
        d_old = DomainSet(tuple((f"o{j}", 10**6) for j in range(3)))
        upd = DomainUpdate.add((("n0", 1),))
        d_new, _ = apply_update(d_old, upd)
        A = np.array([[-3.0, 0.5, -0.3, 0.2], [-2.0, 0.1, 0.4, -0.2]])
        g = GroundTruthModel(d_new.ids, ("t0", "t1"), np.full(2, 0.5), A)
        rep = theorem2_bound(g, d_old, upd, budget=RepetitionBudget(1, 2_500_000))
        assert rep["one_minus_rho"] <= 1e-6
        assert rep["reuse_gap"] <= 1e-3


@pytest.mark.slow
def test_c08_theorem_audits():
    with criterion(8, "theorem audits"):
        accepted, every = run_campaign(100, seed=0)
        s = summarize(accepted, every)
        assert s["instances"] == 100
        assert s["thm1_holds"] == 100 and s["thm2_holds"] == 100, s
        assert s["monotone"] >= 95, s


def test_c09_coupling_ranking():
    with criterion(9, "coupling-ranking replication"):
        d_old = DomainSet(tuple((f"o{j}", 1000) for j in range(4)))
        upd = DomainUpdate.add((("n0", 1000),))
        d_new, unaffected = apply_update(d_old, upd)
        # t0 and t1 draw on o0 and n0 interchangeably; o1..o3 serve other tasks
        cols = {"o0": 0, "o1": 1, "o2": 2, "o3": 3, "n0": 4}
        raw = np.array([
            [-3.0, 0.0, 0.0, 0.0, -3.5],
            [-3.0, 0.0, 0.0, 0.0, -3.0],
            [0.0, -1.5, -1.0, -1.2, 0.0],
            [0.0, -1.0, -1.4, -0.8, 0.0],
        ])
        A = raw[:, [cols[i] for i in d_new.ids]]
        g = GroundTruthModel(d_new.ids, ("t0", "t1", "t2", "t3"), np.full(4, 0.5), A)
        rows = rank_recompute_candidates(g, unaffected, ["n0"])
        assert rows[0][0] == "o0"
        assert rows[0][2] >= 2 * rows[1][2]

        previous = optimum(g.restrict(d_old.ids).objective(), d_old.ids)
        best = truth_optimum(g)
        oracle = TruthOracle(g)
        full = ReusePlan.single(d_new, previous.restrict(tuple(unaffected)))
        part = partial_plan(d_new, previous, [u for u in unaffected if u != "o0"])
        q_full, _, _ = full_mix_reuse(full, SwarmConfig(3 * (full.dimension + 1), seed=0), oracle, lam=0.0)
        q_part, _, _ = partial_mix_reuse(part, SwarmConfig(3 * (part.dimension + 1), seed=0), oracle,
                                         unaffected=unaffected, lam=0.0)
        gap_full = gap_report(g, full, q_full, best).performance_gap
        gap_part = gap_report(g, part, q_part, best).performance_gap
        assert gap_part < gap_full, (gap_part, gap_full)


def test_c10_cli_reruns_byte_identical(tmp_path, monkeypatch, capsys):
    with criterion(10, "CLI determinism"):
        monkeypatch.chdir(tmp_path)
        d = DomainSet((("a:x", 4000), ("a:y", 6000), ("b:z", 5000), ("c:w", 3000)))
        upd = DomainUpdate.add((("n:u", 2000), ("n:v", 3000)))
        full, _ = apply_update(d, upd)
        for name, obj in (("domains.json", d), ("update.json", upd), ("full.json", full)):
            (tmp_path / name).write_text(json.dumps(obj.to_dict()))
        commands = [
            ("truth", ["truth", "--domains", "full.json", "--tasks", "4", "--seed", "3"]),
            ("base", ["base", "--domains", "domains.json", "--oracle", "synthetic:truth/truth.json", "--c", "2"]),
            ("sample", ["sample", "--domains", "domains.json", "--format", "csv"]),
            ("fit", ["fit", "--results", "base/swarm.csv", "--domains", "domains.json"]),
            ("optimize", ["optimize", "--models", "fit/models.json", "--domains", "domains.json"]),
            ("reuse", ["reuse", "--chain", "base", "--update", "update.json",
                       "--strategy", "partial-reuse:a:y,b:z,c:w", "--oracle", "synthetic:truth/truth.json", "--c", "2"]),
            ("simulate", ["simulate", "--strategy", "swarm-reuse", "--c", "2"]),
            ("validate", ["validate", "--instances", "2"]),
            ("tv", ["tv", "published:partial_reuse", "published:full_recompute", "published:natural"]),
            ("kappa", ["kappa", "--truth", "truth/truth.json", "--affected", "n:u,n:v"]),
        ]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for out, argv in commands:
                assert main(argv + ["--out-dir", out]) == 0, out
                assert (tmp_path / out / MANIFEST_NAME).exists()
                rc = main(["rerun", "--out-dir", f"{out}-replay", f"{out}/{MANIFEST_NAME}"])
                assert rc == 0, f"{out} rerun differs"

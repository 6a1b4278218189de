import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixopt.domains import DomainSet, DomainUpdate, Mixture, RepetitionBudget, apply_update, repetition_caps
from mixopt.errors import AllMassRemoved, DimensionMismatch, InfeasibleCaps, UnsupportedUpdateKind, ValidationError
from mixopt.fixtures import update_chain
from mixopt.oracle import GroundTruthModel, SwarmDataset, evaluate_truth, truth_optimum
from mixopt.pipeline import TruthOracle
from mixopt.reuse import (
    CollapsedMixture,
    ReusePlan,
    collapse,
    collapsed_caps,
    expand,
    full_mix_reuse,
    full_reuse_plan,
    partial_mix_reuse,
    partial_plan,
    remap_swarm_matrix,
    renormalize_remove,
    swarm_reuse,
)
from mixopt.swarm import SwarmConfig

from oracles import tv


def four_domain_plan(ratios=(0.25, 0.25, 0.5)):
    d = DomainSet((("a", 100), ("b", 100), ("c", 200), ("n", 300)))
    return ReusePlan.single(d, Mixture(("a", "b", "c"), ratios))


def test_expand_worked_example():
    plan = four_domain_plan()
    q = expand(plan, CollapsedMixture([0.4], [0.6]))
    assert q.weights == pytest.approx([0.1, 0.1, 0.2, 0.6], abs=1e-12)


def test_expand_all_mass_on_virtual():
    plan = four_domain_plan()
    assert expand(plan, CollapsedMixture([1.0], [0.0])).weights == pytest.approx([0.25, 0.25, 0.5, 0.0], abs=1e-15)


def test_expand_revise_example():
    d = DomainSet((("a", 1), ("b", 2), ("r", 3)))
    plan = ReusePlan.single(d, Mixture(("a", "b"), [0.33, 0.67]))
    assert expand(plan, CollapsedMixture([0.4], [0.6])).weights == pytest.approx([0.132, 0.268, 0.6], abs=1e-12)


def test_collapse_examples():
    plan = four_domain_plan()
    r, res = collapse(plan, Mixture(plan.post_update.ids, [0.1, 0.1, 0.2, 0.6]))
    assert r.virtual == pytest.approx([0.4]) and r.comp == pytest.approx([0.6]) and res == pytest.approx(0, abs=1e-15)
    _, res = collapse(plan, Mixture(plan.post_update.ids, [0.25] * 4))
    assert res > 0
    with pytest.raises(DimensionMismatch):
        collapse(plan, Mixture(("a", "b"), [0.5, 0.5]))


@given(st.integers(0, 2**31))
def test_expand_collapse_round_trip(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(3, 8))
    k = int(rng.integers(1, m))
    d = DomainSet(tuple((f"d{j}", int(rng.integers(1, 1000))) for j in range(m)))
    plan = ReusePlan.single(d, Mixture(d.ids[:k], rng.dirichlet(np.ones(k))))
    r = rng.dirichlet(np.ones(plan.dimension))
    cm = CollapsedMixture.from_vector(plan, r)
    back, res = collapse(plan, expand(plan, cm))
    assert np.max(np.abs(back.to_vector(plan) - r)) <= 1e-12
    assert res <= 1e-12


def test_collapsed_caps_examples():
    d = DomainSet((("a", 100), ("b", 100), ("n", 10**9)))
    plan = ReusePlan.single(d, Mixture(("a", "b"), [0.5, 0.5]))
    caps = collapsed_caps(plan, RepetitionBudget(4, 1000))
    v = plan.virtual_indices()[0]
    assert caps[v] == pytest.approx(0.8) and caps[1 - v] == 1.0
    plan0 = ReusePlan.single(d, Mixture(("a", "b"), [1.0, 0.0]))
    assert collapsed_caps(plan0, RepetitionBudget(4, 1000))[v] == pytest.approx(0.4)
    tiny = DomainSet((("a", 1), ("b", 1), ("n", 1)))
    with pytest.raises(InfeasibleCaps):
        collapsed_caps(ReusePlan.single(tiny, Mixture(("a", "b"), [0.5, 0.5])), RepetitionBudget(4, 1000))


@given(st.integers(0, 2**31))
def test_caps_equivalence(seed):
    # expand(r) obeys the full caps exactly when r obeys the collapsed caps
    rng = np.random.default_rng(seed)
    m = int(rng.integers(3, 7))
    k = int(rng.integers(1, m))
    d = DomainSet(tuple((f"d{j}", int(rng.integers(10, 1000))) for j in range(m)))
    ratios = rng.dirichlet(np.ones(k))
    ratios[rng.random(k) < 0.2] = 0.0
    if ratios.sum() == 0:
        ratios[0] = 1.0
    plan = ReusePlan.single(d, Mixture(d.ids[:k], ratios))
    b = RepetitionBudget(4, int(rng.integers(500, 4000)))
    try:
        cc = collapsed_caps(plan, b)
    except InfeasibleCaps:
        return
    full = repetition_caps(d, b).values
    E = plan.expansion_matrix()
    for r in rng.dirichlet(np.ones(plan.dimension) * 0.5, size=50):
        ok_collapsed = bool(np.all(r <= cc + 1e-12))
        ok_full = bool(np.all(E @ r <= full + 1e-12))
        assert ok_collapsed == ok_full


def test_renormalize_remove_examples():
    p = Mixture(("a", "b", "c"), [0.25, 0.25, 0.5])
    assert renormalize_remove(p, ["a"]).weights == pytest.approx([1 / 3, 2 / 3], abs=1e-12)
    z = Mixture(("a", "b", "c"), [0.0, 0.5, 0.5])
    assert renormalize_remove(z, ["a"]).weights == pytest.approx([0.5, 0.5])
    assert renormalize_remove(p, ["a", "b"]).weights == pytest.approx([1.0])
    with pytest.raises(AllMassRemoved):
        renormalize_remove(z, ["b", "c"])


def test_expand_partition_example():
    d = DomainSet((("u1", 1), ("u2", 2), ("x1", 1), ("x2", 3)))
    plan = ReusePlan.single(d, Mixture(("u1", "u2"), [0.33, 0.67]))
    q = expand(plan, CollapsedMixture([0.6], [0.1, 0.3]))
    assert q.as_dict() == pytest.approx({"u1": 0.198, "u2": 0.402, "x1": 0.1, "x2": 0.3}, abs=1e-12)


def test_plan_invariants():
    d = DomainSet((("a", 1), ("b", 1)))
    with pytest.raises(ValidationError):
        partial_plan(d, Mixture(("a", "b"), [0.5, 0.5]), ())
    with pytest.raises(ValidationError):
        ReusePlan(d, (), ("a", "b"))


def test_update_one_collapses_to_sixteen():
    initial, steps = update_chain()
    d1, unaffected = apply_update(initial, steps[0][1])
    plan = ReusePlan.single(d1, Mixture(tuple(unaffected), np.ones(len(unaffected))))
    assert plan.dimension == 16
    moved = partial_plan(d1, Mixture(tuple(unaffected), np.ones(len(unaffected))), unaffected[1:])
    assert moved.dimension == 17


def test_remap_examples():
    d_old = DomainSet((("x", 300), ("y", 100)))
    add = DomainUpdate.add((("n1", 10), ("n2", 10)))
    d_add, _ = apply_update(d_old, add)
    X, keep = remap_swarm_matrix([[0.3, 0.7]], d_old, add, d_add)
    assert dict(zip(d_add.ids, X[0])) == pytest.approx({"x": 0.3, "y": 0.7, "n1": 0.0, "n2": 0.0}) and keep.all()
    part = DomainUpdate.partition("x", (("x1", 150), ("x2", 150)))
    d_part, _ = apply_update(d_old, part)
    X, _ = remap_swarm_matrix([[0.4, 0.6]], d_old, part, d_part)
    got = dict(zip(d_part.ids, X[0]))
    assert got == pytest.approx({"x1": 0.2, "x2": 0.2, "y": 0.6})
    rev = DomainUpdate.revise("x", "x'", 300)
    d_rev, _ = apply_update(d_old, rev)
    with pytest.raises(UnsupportedUpdateKind):
        remap_swarm_matrix([[0.4, 0.6]], d_old, rev, d_rev)


def test_swarm_reuse_rejects_revise():
    d = DomainSet((("x", 300), ("y", 100)))
    g = GroundTruthModel.random(("x", "y", "x'"), 2, seed=0)
    old = SwarmDataset(d, g.tasks, [[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]], np.ones((3, 2)))
    with pytest.raises(UnsupportedUpdateKind):
        swarm_reuse(old, DomainUpdate.revise("x", "x'", 300), SwarmConfig(3), TruthOracle(g))


# --- end-to-end reuse on synthetic truths ---------------------------------------


def add_instance(seed=0, m_old=4, m_new=2, n=6):
    d_old = DomainSet(tuple((f"o{j}", 1000) for j in range(m_old)))
    upd = DomainUpdate.add(tuple((f"n{j}", 500) for j in range(m_new)))
    d_new, unaffected = apply_update(d_old, upd)
    g = GroundTruthModel.random(d_new.ids, n, seed=seed)
    return d_old, upd, d_new, unaffected, g


def test_collapsed_predictions_match_full_truth():
    _, _, d_new, unaffected, g = add_instance(1)
    plan = ReusePlan.single(d_new, Mixture(tuple(unaffected), [0.1, 0.2, 0.3, 0.4]))
    _, _, res = full_mix_reuse(plan, SwarmConfig(3 * (plan.dimension + 1), seed=2), TruthOracle(g), lam=0.0)
    S = res.swarm.X
    full = evaluate_truth(g, S @ plan.expansion_matrix().T)
    assert np.max(np.abs(res.models.predict_tasks(S) - full)) <= 1e-6


def test_reuse_exact_at_optimal_ratios():
    _, _, d_new, unaffected, g = add_instance(14)
    q = truth_optimum(g)
    plan = ReusePlan.single(d_new, q.restrict(tuple(unaffected)))
    out, manifest, _ = full_mix_reuse(plan, SwarmConfig(3 * (plan.dimension + 1), seed=0), TruthOracle(g), lam=0.0)
    assert tv(out.weights, q.weights) <= 0.02
    assert manifest["collapsed_dimension"] == plan.dimension


def test_partial_with_all_unaffected_equals_full():
    _, _, d_new, unaffected, g = add_instance(5)
    prev = Mixture(tuple(unaffected), [0.4, 0.3, 0.2, 0.1])
    plan = partial_plan(d_new, prev, unaffected)
    cfg = SwarmConfig(3 * (plan.dimension + 1), seed=4)
    a, _, _ = full_mix_reuse(plan, cfg, TruthOracle(g))
    b, _, _ = partial_mix_reuse(plan, cfg, TruthOracle(g), unaffected=unaffected)
    assert a == b
    with pytest.raises(ValidationError):
        partial_mix_reuse(ReusePlan.single(d_new, Mixture(("n0",), [1.0])), cfg, TruthOracle(g), unaffected=unaffected)


def test_full_reuse_plan_routes_pure_remove():
    d = DomainSet((("a", 1), ("b", 1), ("c", 2)))
    post, plan = full_reuse_plan(d, DomainUpdate.remove(["a"]), Mixture(d.ids, [0.25, 0.25, 0.5]))
    assert plan is None and post.ids == ("b", "c")

"""Mixture reuse under domain updates.

Reused domains are frozen into groups with fixed internal ratios. Each group
becomes one *virtual* coordinate of a collapsed mixture, the remaining
(recomputed) domains keep their own coordinates, and the expansion map sends
a collapsed mixture ``r`` back to the full mixture with ``q_j = r_g * p_j``
for ``j`` in group ``g``. The usual reuse setting has a single group.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._io import canonical_json
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
from .errors import (
    AllMassRemoved,
    DimensionMismatch,
    IdCollision,
    InfeasibleCaps,
    UnknownDomain,
    UnsupportedUpdateKind,
    ValidationError,
)
from .oracle import SwarmDataset
from .pipeline import PipelineResult, olmix_base, run_offline
from .swarm import SwarmConfig

VIRTUAL_PREFIX = "virtual:"


@dataclass(frozen=True, eq=False)
class FrozenGroup:
    name: str
    ids: tuple
    ratios: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.ratios, dtype=np.float64)
        if r.shape != (len(self.ids),) or np.any(r < 0) or not np.isfinite(r).all():
            raise ValidationError(f"bad frozen ratios for group {self.name}")
        if abs(r.sum() - 1.0) > 1e-9:
            if r.sum() <= 0:
                raise ValidationError(f"frozen ratios of group {self.name} have no mass")
            r = r / r.sum()
        r.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "ratios", r)

    @property
    def virtual_id(self):
        return VIRTUAL_PREFIX + self.name

    def to_dict(self):
        return {"name": self.name, "ratios": dict(zip(self.ids, self.ratios.tolist()))}


@dataclass(frozen=True, eq=False)
class ReusePlan:
    """Split of a post-update domain set into frozen groups and recomputed domains."""

    post_update: DomainSet
    groups: tuple
    d_comp: tuple

    def __post_init__(self):
        groups = tuple(self.groups)
        comp = tuple(self.d_comp)
        if not groups or not any(len(g.ids) for g in groups):
            raise ValidationError("a reuse plan needs at least one reused domain; use full recomputation")
        fix = [i for g in groups for i in g.ids]
        everything = fix + list(comp)
        if len(set(everything)) != len(everything):
            raise ValidationError("reused and recomputed domains overlap")
        if set(everything) != set(self.post_update.ids):
            missing = sorted(set(self.post_update.ids) - set(everything))
            extra = sorted(set(everything) - set(self.post_update.ids))
            if extra:
                raise UnknownDomain(", ".join(extra))
            raise ValidationError(f"domains neither reused nor recomputed: {missing}")
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise IdCollision("duplicate group names")
        vids = {g.virtual_id for g in groups}
        if vids & set(comp):
            raise IdCollision("a recomputed domain id clashes with a virtual domain id")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "d_comp", comp)

    @classmethod
    def single(cls, post_update: DomainSet, frozen: Mixture, d_comp=None, name="fix") -> "ReusePlan":
        """One frozen group with ratios ``frozen`` (its ids form d_fix)."""
        if d_comp is None:
            d_comp = tuple(i for i in post_update.ids if i not in set(frozen.ids))
        return cls(post_update, (FrozenGroup(name, frozen.ids, frozen.weights),), tuple(d_comp))

    @property
    def d_fix(self) -> tuple:
        return tuple(i for g in self.groups for i in g.ids)

    @property
    def frozen_ratios(self) -> Mixture:
        """p_fix over d_fix. With several groups each group's ratios are scaled by its token share."""
        if len(self.groups) == 1:
            g = self.groups[0]
            return Mixture(g.ids, g.ratios, self.post_update.version)
        tm = self.post_update.token_map()
        mass = np.array([sum(tm[i] for i in g.ids) for g in self.groups], dtype=np.float64)
        mass = mass / mass.sum() if mass.sum() > 0 else np.full(len(mass), 1.0 / len(mass))
        w = np.concatenate([mk * g.ratios for mk, g in zip(mass, self.groups)])
        return Mixture(self.d_fix, w, self.post_update.version)

    @property
    def dimension(self) -> int:
        return len(self.groups) + len(self.d_comp)

    def collapsed_domains(self) -> DomainSet:
        """Collapsed space: one virtual domain per group (tokens summed) plus d_comp."""
        tm = self.post_update.token_map()
        items = [(g.virtual_id, sum(tm[i] for i in g.ids)) for g in self.groups]
        items += [(i, tm[i]) for i in self.d_comp]
        return DomainSet(tuple(items), self.post_update.version)

    def _layout(self):
        cd = self.collapsed_domains()
        pos = {d: k for k, d in enumerate(cd.ids)}
        vidx = np.array([pos[g.virtual_id] for g in self.groups], dtype=np.int64)
        cidx = np.array([pos[i] for i in self.d_comp], dtype=np.int64)
        return cd, vidx, cidx

    def expansion_matrix(self) -> np.ndarray:
        """Matrix E with ``q = E r`` (rows: post-update ids, columns: collapsed ids)."""
        cd, vidx, cidx = self._layout()
        full = {d: k for k, d in enumerate(self.post_update.ids)}
        E = np.zeros((len(self.post_update), len(cd)))
        for g, col in zip(self.groups, vidx):
            for i, w in zip(g.ids, g.ratios):
                E[full[i], col] = w
        for i, col in zip(self.d_comp, cidx):
            E[full[i], col] = 1.0
        return E

    def virtual_indices(self) -> np.ndarray:
        return self._layout()[1]

    def to_dict(self):
        return {
            "post_update": self.post_update.to_dict(),
            "groups": [g.to_dict() for g in self.groups],
            "d_comp": list(self.d_comp),
        }

    def to_json(self):
        return canonical_json(self.to_dict())


@dataclass(frozen=True, eq=False)
class CollapsedMixture:
    """Weights on the virtual domains (one per group) and on d_comp (plan order)."""

    virtual: np.ndarray
    comp: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.virtual, dtype=np.float64))
        c = np.atleast_1d(np.asarray(self.comp, dtype=np.float64)).reshape(-1)
        if np.any(v < -1e-12) or np.any(c < -1e-12):
            raise ValidationError("collapsed weights must be nonnegative")
        s = v.sum() + c.sum()
        if abs(s - 1.0) > 1e-9:
            raise ValidationError(f"collapsed weights sum to {s!r}")
        object.__setattr__(self, "virtual", np.maximum(v, 0.0))
        object.__setattr__(self, "comp", np.maximum(c, 0.0))

    @property
    def r_v(self) -> float:
        """Total weight on reused domains."""
        return float(self.virtual.sum())

    @property
    def comp_weights(self) -> np.ndarray:
        return self.comp

    def to_vector(self, plan: ReusePlan) -> np.ndarray:
        cd, vidx, cidx = plan._layout()
        if self.virtual.shape[0] != len(vidx) or self.comp.shape[0] != len(cidx):
            raise DimensionMismatch("collapsed mixture does not match the plan")
        r = np.zeros(len(cd))
        r[vidx] = self.virtual
        r[cidx] = self.comp
        return r

    @classmethod
    def from_vector(cls, plan: ReusePlan, r) -> "CollapsedMixture":
        _, vidx, cidx = plan._layout()
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (len(vidx) + len(cidx),):
            raise DimensionMismatch("collapsed vector length does not match the plan")
        return cls(r[vidx], r[cidx])


def expand(plan: ReusePlan, r: CollapsedMixture) -> Mixture:
    """Full mixture with reused weights ``r_g * p_j`` and recomputed weights copied."""
    q = plan.expansion_matrix() @ r.to_vector(plan)
    return Mixture(plan.post_update.ids, q, plan.post_update.version)


def collapse(plan: ReusePlan, q: Mixture):
    """Collapsed coordinates of ``q`` and its distance from the reuse subspace.

    The residual is the largest total-variation distance between a group's
    normalised share of ``q`` and that group's frozen ratios (0 when ``q`` is
    an expansion).
    """
    if set(q.ids) != set(plan.post_update.ids):
        raise DimensionMismatch("mixture is not over the plan's domain set")
    qm = q.as_dict()
    virtual, residual = [], 0.0
    for g in plan.groups:
        part = np.array([qm[i] for i in g.ids])
        mass = part.sum()
        virtual.append(mass)
        if mass > 0:
            residual = max(residual, 0.5 * float(np.abs(part / mass - g.ratios).sum()))
    comp = np.array([qm[i] for i in plan.d_comp])
    return CollapsedMixture(np.array(virtual), comp), residual


def collapsed_caps(plan: ReusePlan, b: RepetitionBudget) -> np.ndarray:
    """Repetition caps in collapsed coordinates (canonical collapsed order).

    A virtual domain may take at most ``min_j k N_j / (R p_j)`` over members
    with ``p_j > 0``; recomputed domains keep ``k N_j / R``. All caps clip at 1.
    """
    cd, vidx, cidx = plan._layout()
    tm = plan.post_update.token_map()
    caps = np.empty(len(cd))
    for g, col in zip(plan.groups, vidx):
        bounds = [b.k * tm[i] / (b.R * w) for i, w in zip(g.ids, g.ratios) if w > 0]
        caps[col] = min(1.0, min(bounds)) if bounds else 1.0
    for i, col in zip(plan.d_comp, cidx):
        caps[col] = min(1.0, b.k * tm[i] / b.R)
    if caps.sum() < 1.0 - 1e-12:
        raise InfeasibleCaps(f"collapsed caps sum to {caps.sum():.6g} < 1")
    return caps


def collapsed_natural(plan: ReusePlan) -> Mixture:
    """KL anchor in collapsed space: virtual tokens are the sum over each group."""
    return natural_distribution(plan.collapsed_domains())


def renormalize_remove(p: Mixture, removed) -> Mixture:
    """Drop ``removed`` ids and renormalise the survivors."""
    removed = set(removed)
    unknown = removed - set(p.ids)
    if unknown:
        raise UnknownDomain(", ".join(sorted(unknown)))
    keep = [i for i in p.ids if i not in removed]
    w = np.array([p[i] for i in keep])
    if not keep or w.sum() <= 0:
        raise AllMassRemoved("no surviving mass after removal")
    return Mixture(keep, w, p.version + 1)


def full_mix_reuse(
    plan: ReusePlan,
    swarm: SwarmConfig,
    oracle,
    *,
    fit=None,
    granularity=None,
    lam: float = 0.05,
    budget: RepetitionBudget | None = None,
    solver=None,
):
    """Recompute only the collapsed problem and expand its solution.

    Returns the proposed mixture over ``plan.post_update`` and a manifest dict.
    The collapsed swarm never sparsifies virtual coordinates.
    """
    cd = plan.collapsed_domains()
    E = plan.expansion_matrix()
    caps = collapsed_caps(plan, budget) if budget is not None else None
    res: PipelineResult = run_offline(
        cd,
        swarm,
        oracle,
        fit=fit,
        granularity=granularity,
        lam=lam,
        caps=caps,
        p0=collapsed_natural(plan),
        solver=solver,
        expand=lambda S: S @ E.T,
        full_ids=plan.post_update.ids,
        protect=plan.virtual_indices(),
    )
    q = Mixture(plan.post_update.ids, E @ res.mixture.weights, plan.post_update.version)
    manifest = dict(res.manifest, plan=plan.to_dict(), collapsed_dimension=plan.dimension,
                    collapsed_solution=res.mixture.as_dict())
    return q, manifest, res


def partial_mix_reuse(plan: ReusePlan, swarm: SwarmConfig, oracle, *, unaffected, **kw):
    """Full mixture reuse on a plan whose frozen domains are a chosen subset of the unaffected ones."""
    bad = sorted(set(plan.d_fix) - set(unaffected))
    if bad:
        raise ValidationError(f"partial reuse may only freeze unaffected domains; got {bad}")
    return full_mix_reuse(plan, swarm, oracle, **kw)


def partial_plan(post_update: DomainSet, previous: Mixture, d_partial, name="fix") -> ReusePlan:
    """Plan freezing ``d_partial`` at the ratios ``previous`` gives them."""
    d_partial = tuple(d_partial)
    if not d_partial:
        raise ValidationError("empty reuse set: this is full recomputation")
    return ReusePlan.single(post_update, previous.restrict(d_partial), name=name)


def full_reuse_plan(d_old: DomainSet, update: DomainUpdate, previous: Mixture):
    """Post-update set and full-reuse plan freezing every unaffected domain.

    Returns ``(post_update, plan)``; ``plan`` is None for a pure removal,
    which is handled by :func:`renormalize_remove`.
    """
    post, unaffected = apply_update(d_old, update)
    if update.kind is UpdateKind.REMOVE and set(unaffected) == set(post.ids):
        return post, None
    return post, ReusePlan.single(post, previous.restrict(unaffected))


# --- swarm reuse -------------------------------------------------------------


def remap_swarm_matrix(X_old, d_old: DomainSet, update: DomainUpdate, d_new: DomainSet, *, allow_drop=False):
    """Represent old swarm mixtures on the post-update domain set.

    Add zero-pads; Partition splits the parent's weight by child token share.
    Remove and Revise are only accepted with ``allow_drop``: runs that put
    weight on an affected domain are dropped and the rest kept. Returns the
    mapped matrix and the boolean mask of kept rows.
    """
    X_old = np.atleast_2d(np.asarray(X_old, dtype=np.float64))
    old_pos = {d: k for k, d in enumerate(d_old.ids)}
    keep = np.ones(X_old.shape[0], dtype=bool)
    if update.kind in (UpdateKind.REMOVE, UpdateKind.REVISE):
        if not allow_drop:
            raise UnsupportedUpdateKind(f"old swarms cannot be reused across a {update.kind.value} update")
        for a in update.affected:
            keep &= X_old[:, old_pos[a]] <= 0
    X = X_old[keep]
    out = np.zeros((X.shape[0], len(d_new)))
    new_tm = d_new.token_map()
    for k, i in enumerate(d_new.ids):
        if i in old_pos and not (update.kind is UpdateKind.REVISE and i in update.affected):
            out[:, k] = X[:, old_pos[i]]
    if update.kind is UpdateKind.PARTITION:
        parent = update.affected[0]
        children = update.partition_map[parent]
        tot = sum(new_tm[c] for c in children)
        for c in children:
            share = new_tm[c] / tot if tot > 0 else 1.0 / len(children)
            out[:, d_new.index(c)] = X[:, old_pos[parent]] * share
    s = out.sum(axis=1)
    good = s > 0
    out[good] /= s[good][:, None]
    idx = np.flatnonzero(keep)
    keep[idx[~good]] = False
    return out[good], keep


def swarm_reuse(
    old: SwarmDataset,
    update: DomainUpdate,
    swarm: SwarmConfig,
    oracle,
    *,
    fit=None,
    granularity=None,
    lam: float = 0.05,
    budget: RepetitionBudget | None = None,
    solver=None,
):
    """Refit on old runs mapped to the new domain set plus ``swarm.count`` fresh runs."""
    if update.kind not in (UpdateKind.ADD, UpdateKind.PARTITION):
        raise UnsupportedUpdateKind(f"swarm reuse supports add and partition, not {update.kind.value}")
    d_new, _ = apply_update(old.domains, update)
    X, keep = remap_swarm_matrix(old.X, old.domains, update, d_new)
    mapped = SwarmDataset(d_new, old.tasks, X, old.Y[keep])
    res = olmix_base(d_new, swarm, oracle, fit=fit, granularity=granularity, lam=lam, budget=budget,
                     solver=solver, extra=mapped)
    manifest = dict(res.manifest, reused_runs=int(mapped.K), update=update.to_dict())
    return res.mixture, manifest, res

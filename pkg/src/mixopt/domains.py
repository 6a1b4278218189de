"""Domain sets, mixtures, token budgets and domain-update operators."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from ._io import canonical_json
from .errors import (
    DimensionMismatch,
    EmptyDomainSet,
    IdCollision,
    PartitionTokenMismatch,
    SchemaError,
    SimplexViolation,
    UnknownDomain,
    ValidationError,
)

log = logging.getLogger(__name__)

PARTITION_SLACK = 0.005
SUM_TOL = 1e-9


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DomainSet:
    """Named domains with token counts, kept in lexicographic id order."""

    domains: tuple = ()
    version: int = 0

    def __post_init__(self):
        pairs = self.domains.items() if isinstance(self.domains, Mapping) else self.domains
        items = []
        for entry in pairs:
            if isinstance(entry, Mapping):
                did, tok = entry["id"], entry["tokens"]
            else:
                did, tok = entry
            if not isinstance(did, str) or not did:
                raise ValidationError(f"domain id must be a nonempty string, got {did!r}")
            if isinstance(tok, float):
                if not tok.is_integer():
                    raise ValidationError(f"token count for {did} must be an integer")
                tok = int(tok)
            tok = int(tok)
            if tok < 0:
                raise ValidationError(f"token count for {did} is negative")
            items.append((did, tok))
        if not items:
            raise EmptyDomainSet("a domain set needs at least one domain")
        ids = [i for i, _ in items]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise IdCollision(f"duplicate domain ids: {dup}")
        if not any(t > 0 for _, t in items):
            raise EmptyDomainSet("at least one domain must have tokens > 0")
        object.__setattr__(self, "domains", tuple(sorted(items)))
        object.__setattr__(self, "version", int(self.version))

    @property
    def ids(self) -> tuple:
        return tuple(i for i, _ in self.domains)

    @property
    def tokens(self) -> np.ndarray:
        return np.array([t for _, t in self.domains], dtype=np.float64)

    @property
    def m(self) -> int:
        return len(self.domains)

    def __len__(self):
        return len(self.domains)

    def __contains__(self, did):
        return did in self.token_map()

    def token_map(self) -> dict:
        return dict(self.domains)

    def index(self, did: str) -> int:
        try:
            return self.ids.index(did)
        except ValueError:
            raise UnknownDomain(did) from None

    def indices(self, ids: Iterable[str]) -> np.ndarray:
        pos = {d: k for k, d in enumerate(self.ids)}
        out = []
        for d in ids:
            if d not in pos:
                raise UnknownDomain(d)
            out.append(pos[d])
        return np.array(out, dtype=np.int64)

    def subset(self, ids: Iterable[str]) -> "DomainSet":
        tm = self.token_map()
        missing = [d for d in ids if d not in tm]
        if missing:
            raise UnknownDomain(", ".join(missing))
        return DomainSet(tuple((d, tm[d]) for d in ids), self.version)

    def to_dict(self) -> dict:
        return {"version": self.version, "domains": [{"id": i, "tokens": t} for i, t in self.domains]}

    @classmethod
    def from_dict(cls, obj) -> "DomainSet":
        try:
            return cls(tuple(obj["domains"]), int(obj.get("version", 0)))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad domain set document: {exc}") from None

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


class Mixture:
    """Probability vector over the ids of a domain set.

    Weights are renormalised on construction. Small negative round-off (above
    -1e-12) is clipped to zero; anything more negative is rejected.
    """

    __slots__ = ("ids", "weights", "version")

    def __init__(self, ids: Sequence[str], weights, version: int = 0, *, tol: float | None = None):
        ids = tuple(ids)
        w = np.array(weights, dtype=np.float64).reshape(-1)
        if len(ids) != w.shape[0]:
            raise DimensionMismatch(f"{len(ids)} ids but {w.shape[0]} weights")
        if len(set(ids)) != len(ids):
            raise IdCollision("duplicate ids in mixture")
        if not np.all(np.isfinite(w)):
            raise ValidationError("mixture weights must be finite")
        if np.any(w < -1e-12):
            raise SimplexViolation(f"negative mixture weight {w.min()!r}")
        w = np.maximum(w, 0.0)
        s = w.sum()
        if s <= 0:
            raise SimplexViolation("mixture weights sum to zero")
        if tol is not None and abs(s - 1.0) > tol:
            raise SimplexViolation(f"weights sum to {s!r}, off by more than {tol}")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "weights", _frozen(w / s))
        object.__setattr__(self, "version", int(version))

    def __setattr__(self, name, value):
        raise AttributeError("Mixture is immutable")

    @classmethod
    def over(cls, d: DomainSet, weights, **kw) -> "Mixture":
        return cls(d.ids, weights, d.version, **kw)

    @classmethod
    def from_mapping(cls, d: DomainSet, mapping: Mapping[str, float], **kw) -> "Mixture":
        unknown = set(mapping) - set(d.ids)
        if unknown:
            raise UnknownDomain(", ".join(sorted(unknown)))
        return cls.over(d, [float(mapping.get(i, 0.0)) for i in d.ids], **kw)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, did: str) -> float:
        try:
            return float(self.weights[self.ids.index(did)])
        except ValueError:
            raise UnknownDomain(did) from None

    def __eq__(self, other):
        if not isinstance(other, Mixture):
            return NotImplemented
        return self.ids == other.ids and np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash((self.ids, self.weights.tobytes()))

    def __repr__(self):
        body = ", ".join(f"{i}={w:.4g}" for i, w in zip(self.ids, self.weights))
        return f"Mixture({body})"

    def as_dict(self) -> dict:
        return {i: float(w) for i, w in zip(self.ids, self.weights)}

    def restrict(self, ids: Sequence[str]) -> "Mixture":
        """Renormalised restriction to ``ids``."""
        pos = {d: k for k, d in enumerate(self.ids)}
        missing = [d for d in ids if d not in pos]
        if missing:
            raise UnknownDomain(", ".join(missing))
        return Mixture(ids, self.weights[[pos[d] for d in ids]], self.version)

    def to_dict(self) -> dict:
        return {"version": self.version, "weights": self.as_dict()}

    @classmethod
    def from_dict(cls, obj, d: DomainSet | None = None) -> "Mixture":
        try:
            weights = obj["weights"]
            version = int(obj.get("version", 0))
        except (KeyError, TypeError, AttributeError) as exc:
            raise SchemaError(f"bad mixture document: {exc}") from None
        if d is None:
            ids = sorted(weights)
            return cls(ids, [weights[i] for i in ids], version)
        return Mixture.from_mapping(d, weights)


class UpdateKind(str, Enum):
    ADD = "add"
    REMOVE = "remove"
    PARTITION = "partition"
    REVISE = "revise"


@dataclass(frozen=True)
class DomainUpdate:
    kind: UpdateKind
    affected: tuple = ()
    introduced: tuple = ()
    partition_map: dict | None = None

    def __post_init__(self):
        try:
            kind = UpdateKind(str(getattr(self.kind, "value", self.kind)).lower())
        except ValueError:
            raise SchemaError(f"unknown update kind {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "affected", tuple(self.affected))
        intro = []
        pairs = self.introduced.items() if isinstance(self.introduced, Mapping) else self.introduced
        for entry in pairs:
            if isinstance(entry, Mapping):
                intro.append((str(entry["id"]), int(entry["tokens"])))
            else:
                intro.append((str(entry[0]), int(entry[1])))
        object.__setattr__(self, "introduced", tuple(intro))
        a, n = len(self.affected), len(intro)
        if kind is UpdateKind.ADD and (a != 0 or n == 0):
            raise ValidationError("Add needs no affected ids and at least one introduced domain")
        if kind is UpdateKind.REMOVE and (n != 0 or a == 0):
            raise ValidationError("Remove needs affected ids and no introduced domains")
        if kind is UpdateKind.REVISE and (a != 1 or n != 1):
            raise ValidationError("Revise needs exactly one affected and one introduced id")
        if kind is UpdateKind.PARTITION:
            if a != 1 or n == 0:
                raise ValidationError("Partition needs exactly one affected id and its children")
            children = tuple(i for i, _ in intro)
            pm = self.partition_map
            if pm is None:
                pm = {self.affected[0]: children}
            pm = {k: tuple(v) for k, v in pm.items()}
            if set(pm) != {self.affected[0]} or set(pm[self.affected[0]]) != set(children):
                raise ValidationError("partition_map must map the split domain to the introduced ids")
            object.__setattr__(self, "partition_map", pm)
        elif self.partition_map is not None:
            raise ValidationError("partition_map is only valid for Partition updates")
        ids = [i for i, _ in intro]
        if len(set(ids)) != len(ids):
            raise IdCollision("duplicate introduced ids")

    @classmethod
    def add(cls, introduced):
        return cls(UpdateKind.ADD, (), introduced)

    @classmethod
    def remove(cls, ids):
        return cls(UpdateKind.REMOVE, tuple(ids), ())

    @classmethod
    def partition(cls, parent, children):
        return cls(UpdateKind.PARTITION, (parent,), children)

    @classmethod
    def revise(cls, old_id, new_id, tokens):
        return cls(UpdateKind.REVISE, (old_id,), ((new_id, tokens),))

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind.value,
            "affected": list(self.affected),
            "introduced": [{"id": i, "tokens": t} for i, t in self.introduced],
        }
        if self.partition_map is not None:
            out["partition_map"] = {k: list(v) for k, v in self.partition_map.items()}
        return out

    @classmethod
    def from_dict(cls, obj) -> "DomainUpdate":
        try:
            return cls(
                obj["kind"],
                tuple(obj.get("affected", ())),
                tuple(obj.get("introduced", ())),
                obj.get("partition_map"),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad update document: {exc}") from None

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


@dataclass(frozen=True)
class RepetitionBudget:
    """Each domain may be repeated at most ``k`` times in a run of ``R`` tokens."""

    k: float
    R: int

    def __post_init__(self):
        if not np.isfinite(self.k) or self.k < 1:
            raise ValidationError(f"repetition factor k must be >= 1, got {self.k}")
        if int(self.R) != self.R or self.R <= 0:
            raise ValidationError(f"R must be a positive integer, got {self.R}")
        object.__setattr__(self, "R", int(self.R))

    def to_dict(self):
        return {"k": float(self.k), "R": self.R}


class Caps(NamedTuple):
    values: np.ndarray
    feasible: bool


def partition_slack(d: DomainSet, u: DomainUpdate) -> float:
    """Relative token mismatch between a split domain and its children."""
    if u.kind is not UpdateKind.PARTITION:
        return 0.0
    parent = d.token_map().get(u.affected[0])
    if parent is None:
        raise UnknownDomain(u.affected[0])
    child = sum(t for _, t in u.introduced)
    if parent == 0:
        return 0.0 if child == 0 else float("inf")
    return abs(child - parent) / parent


def apply_update(d: DomainSet, u: DomainUpdate):
    """Apply ``u`` to ``d``.

    Returns the post-update set (version bumped) and the sorted list of
    unaffected ids, i.e. the domains present unchanged on both sides.
    """
    tm = d.token_map()
    missing = [a for a in u.affected if a not in tm]
    if missing:
        raise UnknownDomain(", ".join(missing))
    if u.kind is UpdateKind.PARTITION:
        slack = partition_slack(d, u)
        if slack > PARTITION_SLACK:
            raise PartitionTokenMismatch(
                f"children of {u.affected[0]} differ from parent by {slack:.3%}"
            )
        if slack > 0:
            log.info("partition of %s has token slack %.4f%%", u.affected[0], 100 * slack)
    survivors = {k: v for k, v in tm.items() if k not in set(u.affected)}
    clash = sorted(i for i, _ in u.introduced if i in survivors)
    if clash:
        raise IdCollision(f"introduced ids already present: {clash}")
    unaffected = sorted(survivors)
    survivors.update(dict(u.introduced))
    if not survivors:
        raise EmptyDomainSet("update removes every domain")
    return DomainSet(tuple(survivors.items()), d.version + 1), unaffected


def natural_distribution(d: DomainSet) -> Mixture:
    tok = d.tokens
    total = tok.sum()
    if total <= 0:
        raise EmptyDomainSet("total token count is zero")
    return Mixture.over(d, tok / total)


def repetition_caps(d: DomainSet, b: RepetitionBudget) -> Caps:
    caps = np.minimum(1.0, b.k * d.tokens / b.R)
    return Caps(caps, bool(caps.sum() >= 1.0 - 1e-12))

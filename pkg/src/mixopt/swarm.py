"""Dirichlet swarm sampling and swarm-size rules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._io import canonical_json
from .domains import DomainSet, Mixture, RepetitionBudget, natural_distribution, repetition_caps
from .errors import InfeasibleCaps, RejectionExhausted, ValidationError

ALPHA_FLOOR = 1e-3
MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class SwarmConfig:
    """Swarm sampling settings.

    ``prior`` is a Mixture, ``None`` (natural distribution) or ``"uniform"``.
    The Dirichlet parameters are ``concentration * m * prior`` so that the
    default of 1.0 means one pseudo-count per domain. ``sparse`` is the
    clipping threshold, ``None`` for dense swarms.
    """

    count: int
    prior: Mixture | str | None = None
    concentration: float = 1.0
    sparse: float | None = None
    budget: RepetitionBudget | None = None
    seed: int = 0

    def __post_init__(self):
        if int(self.count) != self.count or self.count < 1:
            raise ValidationError(f"swarm size must be a positive integer, got {self.count}")
        if not (self.concentration > 0 and np.isfinite(self.concentration)):
            raise ValidationError("concentration must be positive")
        if self.sparse is not None and not (0.0 < self.sparse < 0.5):
            raise ValidationError("sparse threshold must lie in (0, 0.5)")
        if isinstance(self.prior, str) and self.prior not in ("natural", "uniform"):
            raise ValidationError(f"unknown prior {self.prior!r}")

    def prior_weights(self, d: DomainSet) -> np.ndarray:
        if self.prior is None or self.prior == "natural":
            return natural_distribution(d).weights
        if self.prior == "uniform":
            return np.full(len(d), 1.0 / len(d))
        if tuple(self.prior.ids) != d.ids:
            raise ValidationError("prior is not over the sampled domain set")
        return self.prior.weights

    def to_dict(self) -> dict:
        if isinstance(self.prior, Mixture):
            prior = self.prior.as_dict()
        else:
            prior = self.prior or "natural"
        return {
            "count": int(self.count),
            "prior": prior,
            "concentration": float(self.concentration),
            "sparse": self.sparse,
            "budget": None if self.budget is None else self.budget.to_dict(),
            "seed": int(self.seed),
        }


def _log_dirichlet(rng, alpha):
    # log Gamma(a) = log Gamma(a + 1) + log(U) / a keeps tiny shapes from underflowing
    g = np.log(rng.standard_gamma(alpha + 1.0)) + np.log(rng.random(alpha.shape[0])) / alpha
    g -= g.max()
    w = np.exp(g)
    return w / w.sum()


def sample_weights(
    alpha: np.ndarray,
    count: int,
    rng: np.random.Generator,
    *,
    sparse: float | None = None,
    caps: np.ndarray | None = None,
    protect: int | None = None,
) -> np.ndarray:
    """Draw ``count`` rows from Dirichlet(``alpha``) under the swarm rules.

    Dense draws containing an exact zero are resampled. Sparse draws clip
    entries below ``sparse`` (except index ``protect``) and renormalise.
    Draws exceeding ``caps`` are rejected.
    """
    alpha = np.maximum(np.asarray(alpha, dtype=np.float64), ALPHA_FLOOR)
    out = np.empty((count, alpha.shape[0]))
    for k in range(count):
        misses = 0
        while True:
            w = _log_dirichlet(rng, alpha)
            ok = True
            if sparse is None:
                ok = bool(np.all(w > 0))
            else:
                clip = w < sparse
                if protect is not None:
                    clip[protect] = False
                w = np.where(clip, 0.0, w)
                s = w.sum()
                ok = s > 0
                if ok:
                    w = w / s
            if ok and caps is not None:
                ok = bool(np.all(w <= caps + 1e-12))
            if ok:
                out[k] = w
                break
            misses += 1
            if misses >= MAX_REJECTIONS:
                raise RejectionExhausted(
                    f"{MAX_REJECTIONS} consecutive draws rejected; caps or sparsity too tight for the prior"
                )
    return out


def sample_swarm(d: DomainSet, cfg: SwarmConfig, *, caps=None, protect=None) -> list:
    """Sample ``cfg.count`` mixtures over ``d``.

    ``caps`` overrides the caps derived from ``cfg.budget`` (used for collapsed
    spaces whose caps are not plain token caps).
    """
    prior = cfg.prior_weights(d)
    alpha = cfg.concentration * len(d) * prior
    if caps is None and cfg.budget is not None:
        caps, feasible = repetition_caps(d, cfg.budget)
        if not feasible:
            raise InfeasibleCaps(f"caps sum to {caps.sum():.4g} < 1 for budget {cfg.budget}")
    rng = np.random.default_rng(cfg.seed)
    W = sample_weights(alpha, cfg.count, rng, sparse=cfg.sparse, caps=caps, protect=protect)
    return [Mixture.over(d, w) for w in W]


def recommended_swarm_size(m: int, c: int) -> int:
    """Linear swarm-size rule ``c (m + 1)``."""
    if m < 1 or c < 1:
        raise ValidationError("m and c must be >= 1")
    return int(c * (m + 1))


def _closest_pow2(x: float) -> int:
    lo = 2 ** int(math.floor(math.log2(x)))
    hi = 2 * lo
    return lo if x - lo <= hi - x else hi


def swarm_schedule(m: int, c: int) -> int:
    """Swarm size used per stage of the development-cycle simulation.

    ``c = 1`` gives ``m + 1``; ``c = 3`` the power of two closest to
    ``3 (m + 1)`` (ties round down); ``c = 2`` half of that; other ``c`` fall
    back to ``c (m + 1)``. ``m = 0`` needs no runs.
    """
    if m < 0 or c < 1:
        raise ValidationError("m must be >= 0 and c >= 1")
    if m == 0:
        return 0
    if c == 1:
        return m + 1
    if c in (2, 3):
        k3 = _closest_pow2(3 * (m + 1))
        return k3 if c == 3 else max(1, k3 // 2)
    return c * (m + 1)


def swarm_to_dict(d: DomainSet, cfg: SwarmConfig, mixes) -> dict:
    return {
        "config": cfg.to_dict(),
        "domains": d.to_dict(),
        "mixtures": [m.weights.tolist() for m in mixes],
    }


def swarm_to_json(d, cfg, mixes) -> str:
    return canonical_json(swarm_to_dict(d, cfg, mixes))

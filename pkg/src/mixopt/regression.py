"""Per-task surrogate regression.

Four families are supported: log-linear ``c + exp(a . p)``, BiMix
``sum_j A_j p_j^-alpha_j``, AutoScale ``c + sum_j (R (A_j + p_j))^-alpha_j``
and an RBF Gaussian process. Parametric families are fitted by damped
Gauss-Newton (Levenberg-Marquardt) with random restarts.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky

from . import _kernels
from ._io import canonical_json
from .errors import MissingModel, SchemaError, SingularKernel, Underdetermined, ValidationError, ZeroVariance, WrongFamily
from .objective import LogLinearObjective, Objective, WeightedSum
from .oracle import SwarmDataset

log = logging.getLogger(__name__)

BIMIX_FLOOR = 1e-6
LOG_BOUND = 30.0  # clamp on log/logit parameters keeps them strictly inside their bounds
GP_JITTER = 1e-8
GP_GRID = {
    "lengthscale": (0.05, 0.1, 0.2, 0.5, 1.0),
    "signal": (0.01, 0.1, 1.0),
    "noise": (1e-6, 1e-4, 1e-2),
}


class NonConvergenceWarning(UserWarning):
    """Every restart of a fit hit the iteration cap; the best iterate is returned."""


class BiMixFloorWarning(UserWarning):
    """Zero mixture weights were floored before a BiMix fit."""


@dataclass(frozen=True)
class FitConfig:
    family: str = "loglinear"
    restarts: int = 8
    max_iters: int = 500
    gtol: float = 1e-10
    seed: int = 0
    R: float | None = None
    gp_grid: dict | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown regression family {self.family!r}")
        if self.restarts < 1:
            raise ValidationError("restarts must be >= 1")

    def to_dict(self):
        return {
            "family": self.family,
            "restarts": self.restarts,
            "max_iters": self.max_iters,
            "gtol": self.gtol,
            "seed": self.seed,
            "R": self.R,
            "gp_grid": self.gp_grid,
        }


# ---------------------------------------------------------------------------
# model families
# ---------------------------------------------------------------------------


class LogLinear(Objective):
    family = "loglinear"
    convex = True

    def __init__(self, c, a):
        self.c = float(c)
        self.a = np.ascontiguousarray(a, dtype=np.float64)
        self.m = self.a.shape[0]
        if not self.c > 0:
            raise ValidationError("log-linear offset must be positive")

    def predict(self, P):
        return self.c + np.exp(np.atleast_2d(P) @ self.a)

    values = predict

    def value_grad(self, p):
        e = float(np.exp(self.a @ p))
        return self.c + e, e * self.a

    def hess(self, p, h=None):
        return float(np.exp(self.a @ p)) * np.outer(self.a, self.a)

    def params(self):
        return {"c": self.c, "A": self.a.tolist()}

    @classmethod
    def from_params(cls, d):
        return cls(d["c"], d["A"])


class BiMix(Objective):
    family = "bimix"
    convex = False

    def __init__(self, A, alpha):
        self.A = np.asarray(A, dtype=np.float64)
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.m = self.A.shape[0]
        if np.any(self.A <= 0) or np.any(self.alpha <= 0):
            raise ValidationError("BiMix parameters must be positive")

    def predict(self, P):
        X = np.maximum(np.atleast_2d(P), BIMIX_FLOOR)
        return (self.A * X ** (-self.alpha)).sum(axis=1)

    values = predict

    def value_grad(self, p):
        x = np.maximum(p, BIMIX_FLOOR)
        t = self.A * x ** (-self.alpha)
        g = np.where(p > BIMIX_FLOOR, -self.alpha * t / x, 0.0)
        return float(t.sum()), g

    def hess(self, p, h=None):
        x = np.maximum(p, BIMIX_FLOOR)
        t = self.A * x ** (-self.alpha)
        return np.diag(np.where(p > BIMIX_FLOOR, self.alpha * (self.alpha + 1) * t / x**2, 0.0))

    def params(self):
        return {"A": self.A.tolist(), "alpha": self.alpha.tolist()}

    @classmethod
    def from_params(cls, d):
        return cls(d["A"], d["alpha"])


class AutoScale(Objective):
    family = "autoscale"
    convex = True

    def __init__(self, c, A, alpha, R):
        self.c = float(c)
        self.A = np.asarray(A, dtype=np.float64)
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.R = float(R)
        self.m = self.A.shape[0]
        if not self.c > 0 or np.any(self.alpha <= 0) or np.any((self.A < 0) | (self.A > 1)):
            raise ValidationError("AutoScale needs c > 0, alpha > 0 and A in [0, 1]")

    def _terms(self, X):
        base = self.A + X
        return np.exp(-self.alpha * (np.log(self.R) + np.log(base))), base

    def predict(self, P):
        t, _ = self._terms(np.atleast_2d(P))
        return self.c + t.sum(axis=1)

    values = predict

    def value_grad(self, p):
        t, base = self._terms(np.asarray(p, dtype=np.float64))
        return self.c + float(t.sum()), -self.alpha * t / base

    def hess(self, p, h=None):
        t, base = self._terms(np.asarray(p, dtype=np.float64))
        return np.diag(self.alpha * (self.alpha + 1) * t / base**2)

    def params(self):
        return {"c": self.c, "A": self.A.tolist(), "alpha": self.alpha.tolist(), "R": self.R}

    @classmethod
    def from_params(cls, d):
        return cls(d["c"], d["A"], d["alpha"], d["R"])


class GaussianProcess(Objective):
    """Posterior mean of an RBF-kernel GP fitted on mean-centred targets."""

    family = "gp"
    convex = False

    def __init__(self, X, y, lengthscale, signal, noise):
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.y = np.asarray(y, dtype=np.float64)
        self.lengthscale, self.signal, self.noise = float(lengthscale), float(signal), float(noise)
        if min(self.lengthscale, self.signal, self.noise) <= 0:
            raise ValidationError("GP hyperparameters must be positive")
        self.m = self.X.shape[1]
        self.mean = float(self.y.mean())
        L, self.jitter = _gp_cholesky(self.X, lengthscale, signal, noise)
        self.weights = cho_solve((L, True), self.y - self.mean)
        self.lml = _gp_lml(L, self.y - self.mean, self.weights)

    def _k(self, P):
        d2 = ((P[:, None, :] - self.X[None, :, :]) ** 2).sum(axis=2)
        return self.signal * np.exp(-d2 / (2 * self.lengthscale**2))

    def predict(self, P):
        return self.mean + self._k(np.atleast_2d(P)) @ self.weights

    values = predict

    def value_grad(self, p):
        p = np.asarray(p, dtype=np.float64)
        k = self._k(p[None, :])[0]
        kw = k * self.weights
        g = -((p[None, :] - self.X) * kw[:, None]).sum(axis=0) / self.lengthscale**2
        return self.mean + float(kw.sum()), g

    def params(self):
        return {
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "lengthscale": self.lengthscale,
            "signal": self.signal,
            "noise": self.noise,
        }

    @classmethod
    def from_params(cls, d):
        return cls(d["X"], d["y"], d["lengthscale"], d["signal"], d["noise"])


FAMILIES = {cls.family: cls for cls in (LogLinear, BiMix, AutoScale, GaussianProcess)}


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------


def _lm(fj, theta, max_iters, gtol, bound=None):
    """Minimise 0.5 ||r(theta)||^2, optionally inside the box |theta| <= bound.

    Returns (theta, cost, converged, iterations).
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _lm_body(fj, theta, max_iters, gtol, bound)


def _free_grad(g, theta, bound):
    if bound is None:
        return g
    pinned = ((theta >= bound) & (g < 0)) | ((theta <= -bound) & (g > 0))
    return np.where(pinned, 0.0, g)


def _lm_body(fj, theta, max_iters, gtol, bound=None):
    theta = np.array(theta, dtype=np.float64)
    if bound is not None:
        theta = np.clip(theta, -bound, bound)
    with np.errstate(over="ignore", invalid="ignore"):
        r, J = fj(theta)
    cost = 0.5 * float(r @ r)
    if not np.isfinite(cost):
        return theta, np.inf, False, 0
    mu = 1e-3
    it = 0
    for it in range(1, max_iters + 1):
        g = J.T @ r
        if np.max(np.abs(_free_grad(g, theta, bound))) < gtol:
            return theta, cost, True, it
        H = J.T @ J
        D = np.maximum(np.diag(H), 1e-12 * max(1.0, np.max(np.diag(H))))
        improved = False
        while mu < 1e20:
            try:
                step = np.linalg.solve(H + mu * np.diag(D), -g)
            except np.linalg.LinAlgError:
                mu *= 4.0
                continue
            cand = theta + step
            if bound is not None:
                cand = np.clip(cand, -bound, bound)
                step = cand - theta
            with np.errstate(over="ignore", invalid="ignore"):
                rn, Jn = fj(cand)
            cn = 0.5 * float(rn @ rn)
            if np.isfinite(cn) and cn < cost:
                improved = True
                break
            mu *= 4.0
        if not improved:
            # no descent direction left at machine precision
            return theta, cost, True, it
        rel = np.linalg.norm(step) / (np.linalg.norm(theta) + 1e-12)
        theta, r, J, cost = cand, rn, Jn, cn
        mu = max(mu / 3.0, 1e-15)
        if rel < 1e-15:
            return theta, cost, True, it
    g = _free_grad(J.T @ r, theta, bound)
    return theta, cost, bool(np.max(np.abs(g)) < gtol), it


def _multistart(fj, starts, max_iters, gtol, scale=1.0, bound=None):
    """Best restart by cost; near-ties (exact interpolants) go to the smallest slope norm."""
    runs = []
    any_conv = False
    total = 0
    for th0 in starts:
        th, cost, conv, its = _lm(fj, th0, max_iters, gtol, bound)
        total += its
        any_conv |= conv
        runs.append((th, cost))
    best_cost = min(c for _, c in runs)
    tie = best_cost + 1e-14 * scale
    th, cost = min((r for r in runs if r[1] <= tie), key=lambda r: float(np.linalg.norm(r[0][1:])))
    return th, cost, any_conv, total


def _check_rows(X, y, m):
    if X.shape[0] < m + 1:
        raise Underdetermined(f"{X.shape[0]} records cannot determine {m + 1} parameters; need K >= m + 1")
    if not np.all(np.isfinite(y)):
        raise ValidationError("scores must be finite")


def _diag(cost, conv, its, restarts, K):
    return {
        "residual_norm": float(np.sqrt(2.0 * cost)),
        "rmse": float(np.sqrt(2.0 * cost / K)),
        "converged": bool(conv),
        "iterations": int(its),
        "restarts": int(restarts),
    }


def _warn_nonconv(name, d):
    if not d["converged"]:
        warnings.warn(f"{name}: every restart hit the iteration cap", NonConvergenceWarning, stacklevel=3)


def _fit_loglinear_xy(X, y, cfg: FitConfig, rng):
    K, m = X.shape
    _check_rows(X, y, m)
    X = np.ascontiguousarray(X)
    y = np.ascontiguousarray(y, dtype=np.float64)
    ymin = float(y.min())

    def init(c0):
        z = np.log(np.maximum(y - c0, 1e-12))
        a, *_ = np.linalg.lstsq(X, z, rcond=None)
        return np.concatenate([[np.log(c0)], a])

    base = 0.9 * ymin if ymin > 0 else 1e-3
    starts = [init(base)]
    for _ in range(cfg.restarts - 1):
        c0 = rng.uniform(0.05, 0.95) * ymin if ymin > 0 else rng.uniform(1e-4, 1e-2)
        th = init(c0)
        th[1:] += rng.normal(0.0, 0.1, size=m)
        starts.append(th)
    fj = lambda th: _kernels.loglinear_residual_jac(th, X, y)
    th, cost, conv, its = _multistart(fj, starts, cfg.max_iters, cfg.gtol, 1.0 + float(y @ y), LOG_BOUND)
    return LogLinear(np.exp(th[0]), th[1:]), _diag(cost, conv, its, cfg.restarts, K)


def _fit_bimix_xy(X, y, cfg: FitConfig, rng):
    K, m = X.shape
    _check_rows(X, y, m)
    if np.any(X < BIMIX_FLOOR):
        warnings.warn(f"BiMix: mixture weights below {BIMIX_FLOOR} floored", BiMixFloorWarning, stacklevel=3)
    Xf = np.maximum(X, BIMIX_FLOOR)
    L = np.log(Xf)
    ybar = max(float(np.mean(y)), 1e-6)

    def fj(th):
        A, al = np.exp(np.clip(th[:m], -LOG_BOUND, LOG_BOUND)), np.exp(np.clip(th[m:], -LOG_BOUND, LOG_BOUND))
        T = A * np.exp(-al * L)
        r = T.sum(axis=1) - y
        J = np.hstack([T, -T * al * L])
        return r, J

    def start(al0):
        A0 = ybar / (m * np.mean(Xf ** (-al0), axis=0))
        return np.concatenate([np.log(A0), np.log(al0)])

    starts = [start(np.full(m, 0.1))]
    for _ in range(cfg.restarts - 1):
        starts.append(start(np.exp(rng.uniform(np.log(0.01), np.log(1.0), size=m))))
    th, cost, conv, its = _multistart(fj, starts, cfg.max_iters, cfg.gtol)
    th = np.clip(th, -LOG_BOUND, LOG_BOUND)
    return BiMix(np.exp(th[:m]), np.exp(th[m:])), _diag(cost, conv, its, cfg.restarts, K)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fit_autoscale_xy(X, y, cfg: FitConfig, rng):
    K, m = X.shape
    _check_rows(X, y, m)
    if cfg.R is None or cfg.R <= 0:
        raise ValidationError("AutoScale needs the training-token budget R")
    logR = np.log(cfg.R)

    def fj(th):
        th = np.clip(th, -LOG_BOUND, LOG_BOUND)
        c = np.exp(th[0])
        A = _sigmoid(th[1 : m + 1])
        al = np.exp(th[m + 1 :])
        base = A + X
        lb = logR + np.log(base)
        T = np.exp(-al * lb)
        r = c + T.sum(axis=1) - y
        J = np.empty((K, 2 * m + 1))
        J[:, 0] = c
        J[:, 1 : m + 1] = -al * T / base * (A * (1 - A))
        J[:, m + 1 :] = -al * lb * T
        return r, J

    ymin, ybar = float(np.min(y)), float(np.mean(y))

    def start(c_frac, A0, spread):
        c0 = max(c_frac * ymin, 1e-3)
        target = max(ybar - c0, 1e-3) / m
        al0 = np.clip(-np.log(target) / (logR + np.log(A0 + 1.0 / m)), 1e-4, 1.0) * spread
        return np.concatenate([[np.log(c0)], np.log(A0 / (1 - A0)), np.log(al0)])

    starts = [start(0.5, np.full(m, 0.5), np.ones(m))]
    for _ in range(cfg.restarts - 1):
        starts.append(start(rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.95, size=m), np.exp(rng.normal(0, 0.3, size=m))))
    th, cost, conv, its = _multistart(fj, starts, cfg.max_iters, cfg.gtol)
    th = np.clip(th, -LOG_BOUND, LOG_BOUND)
    model = AutoScale(np.exp(th[0]), _sigmoid(th[1 : m + 1]), np.exp(th[m + 1 :]), cfg.R)
    return model, _diag(cost, conv, its, cfg.restarts, K)


def _gp_cholesky(X, ell, s2, noise):
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    Kmat = s2 * np.exp(-d2 / (2 * ell**2)) + noise * np.eye(X.shape[0])
    jitter = 0.0
    for attempt in range(4):
        try:
            return cholesky(Kmat + jitter * np.eye(X.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            if attempt == 3:
                break
            jitter += GP_JITTER
    raise SingularKernel(f"kernel not positive definite after jitter {jitter:g}")


def _gp_lml(L, r, w):
    return float(-0.5 * r @ w - np.log(np.diag(L)).sum() - 0.5 * len(r) * np.log(2 * np.pi))


def _fit_gp_xy(X, y, cfg: FitConfig, rng=None):
    if X.shape[0] < 2:
        raise Underdetermined("a GP needs at least two records")
    grid = dict(GP_GRID, **(cfg.gp_grid or {}))
    best, best_lml, tried = None, -np.inf, 0
    for ell in grid["lengthscale"]:
        for s2 in grid["signal"]:
            for nz in grid["noise"]:
                try:
                    gp = GaussianProcess(X, y, ell, s2, nz)
                except SingularKernel:
                    continue
                tried += 1
                if gp.lml > best_lml:
                    best, best_lml = gp, gp.lml
    if best is None:
        raise SingularKernel("every hyperparameter combination gave a singular kernel")
    return best, {
        "log_marginal_likelihood": best_lml,
        "converged": True,
        "grid_points": tried,
        "jitter": best.jitter,
        "rmse": float(np.sqrt(np.mean((best.predict(X) - y) ** 2))),
    }


_FITTERS = {
    "loglinear": _fit_loglinear_xy,
    "bimix": _fit_bimix_xy,
    "autoscale": _fit_autoscale_xy,
    "gp": _fit_gp_xy,
}


# ---------------------------------------------------------------------------
# fitted models and granularity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GranularitySpec:
    """``per-task``, ``per-family`` (with a task -> family map) or ``aggregated``."""

    mode: str = "per-task"
    families: dict | None = None

    def __post_init__(self):
        if self.mode not in ("per-task", "per-family", "aggregated"):
            raise ValidationError(f"unknown granularity {self.mode!r}")
        if self.mode == "per-family" and not self.families:
            raise ValidationError("per-family granularity needs a task -> family map")

    def units(self, tasks):
        """List of ``(unit name, member tasks, objective weight)``."""
        tasks = tuple(tasks)
        n = len(tasks)
        if self.mode == "per-task":
            return [(t, (t,), 1.0 / n) for t in tasks]
        if self.mode == "aggregated":
            return [("aggregate", tasks, 1.0)]
        missing = [t for t in tasks if t not in self.families]
        if missing:
            raise ValidationError(f"family map does not cover tasks {missing}")
        fams = {}
        for t in tasks:
            fams.setdefault(self.families[t], []).append(t)
        return [(f, tuple(ms), len(ms) / n) for f, ms in sorted(fams.items())]

    def to_dict(self):
        return {"mode": self.mode, "families": self.families}


@dataclass(frozen=True, eq=False)
class FittedTaskModel:
    """One fitted surrogate and the tasks it stands for."""

    task: str
    model: Objective
    granularity: str = "per-task"
    members: tuple = ()
    weight: float = 1.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def family(self):
        return self.model.family

    def predict(self, P):
        return self.model.predict(P)

    def to_dict(self):
        return {
            "task": self.task,
            "family": self.family,
            "granularity": self.granularity,
            "members": list(self.members or (self.task,)),
            "weight": self.weight,
            "params": self.model.params(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            model = FAMILIES[d["family"]].from_params(d["params"])
            return cls(d["task"], model, d.get("granularity", "per-task"), tuple(d.get("members", (d["task"],))),
                       float(d.get("weight", 1.0)), dict(d.get("diagnostics", {})))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad fitted-model document: {exc}") from None


@dataclass(frozen=True, eq=False)
class ModelSet:
    """Fitted models for every unit of a granularity, over fixed domain ids."""

    ids: tuple
    tasks: tuple
    granularity: GranularitySpec
    models: tuple

    @property
    def converged(self):
        return all(fm.diagnostics.get("converged", True) for fm in self.models)

    def unit(self, name) -> FittedTaskModel:
        for fm in self.models:
            if fm.task == name:
                return fm
        raise MissingModel(f"no fitted model for {name!r}")

    def model_for_task(self, task) -> FittedTaskModel:
        for fm in self.models:
            if task in (fm.members or (fm.task,)):
                return fm
        raise MissingModel(f"no fitted model covers task {task!r}")

    def predict_tasks(self, P) -> np.ndarray:
        """Predicted scores, one column per task (K x n)."""
        P = np.atleast_2d(P)
        return np.column_stack([self.model_for_task(t).predict(P) for t in self.tasks])

    def to_dict(self):
        return {
            "ids": list(self.ids),
            "tasks": list(self.tasks),
            "granularity": self.granularity.to_dict(),
            "models": [fm.to_dict() for fm in self.models],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            g = d["granularity"]
            return cls(tuple(d["ids"]), tuple(d["tasks"]), GranularitySpec(g["mode"], g.get("families")),
                       tuple(FittedTaskModel.from_dict(x) for x in d["models"]))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad model-set document: {exc}") from None

    def to_json(self):
        return canonical_json(self.to_dict())


def _unit_rng(seed, k):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, k])


def _fit_column(X, y, cfg, k):
    model, diag = _FITTERS[cfg.family](X, y, cfg, _unit_rng(cfg.seed, k))
    return model, diag


def fit_log_linear(data: SwarmDataset, task, restarts=8, seed=0, **kw) -> FittedTaskModel:
    cfg = FitConfig("loglinear", restarts=restarts, seed=seed, **kw)
    model, diag = _fit_column(data.X, data.scores(task), cfg, data.task_index(task))
    _warn_nonconv(f"log-linear fit for {task}", diag)
    return FittedTaskModel(task, model, "per-task", (task,), 1.0 / data.n, diag)


def fit_bimix(data: SwarmDataset, task, restarts=8, seed=0, **kw) -> FittedTaskModel:
    cfg = FitConfig("bimix", restarts=restarts, seed=seed, **kw)
    model, diag = _fit_column(data.X, data.scores(task), cfg, data.task_index(task))
    _warn_nonconv(f"BiMix fit for {task}", diag)
    return FittedTaskModel(task, model, "per-task", (task,), 1.0 / data.n, diag)


def fit_autoscale(data: SwarmDataset, task, restarts=8, seed=0, *, R, **kw) -> FittedTaskModel:
    cfg = FitConfig("autoscale", restarts=restarts, seed=seed, R=R, **kw)
    model, diag = _fit_column(data.X, data.scores(task), cfg, data.task_index(task))
    _warn_nonconv(f"AutoScale fit for {task}", diag)
    return FittedTaskModel(task, model, "per-task", (task,), 1.0 / data.n, diag)


def fit_gp(data: SwarmDataset, task, grid: dict | None = None) -> FittedTaskModel:
    cfg = FitConfig("gp", gp_grid=grid)
    model, diag = _fit_gp_xy(data.X, data.scores(task), cfg)
    return FittedTaskModel(task, model, "per-task", (task,), 1.0 / data.n, diag)


def _threads():
    try:
        return max(1, int(os.environ.get("MIXOPT_THREADS", "1")))
    except ValueError:
        return 1


def fit_models(data: SwarmDataset, cfg: FitConfig | None = None, granularity: GranularitySpec | None = None) -> ModelSet:
    """Fit one surrogate per granularity unit.

    Per-family and aggregated units are fitted on the mean score of their
    member tasks. Units are independent and may run on up to
    ``MIXOPT_THREADS`` threads; results do not depend on the thread count.
    """
    cfg = cfg or FitConfig()
    granularity = granularity or GranularitySpec()
    units = granularity.units(data.tasks)

    def job(k):
        name, members, weight = units[k]
        y = np.mean([data.scores(t) for t in members], axis=0)
        model, diag = _fit_column(data.X, y, cfg, k)
        return FittedTaskModel(name, model, granularity.mode, members, weight, diag)

    workers = min(_threads(), len(units))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            fitted = list(ex.map(job, range(len(units))))
    else:
        fitted = [job(k) for k in range(len(units))]
    for fm in fitted:
        _warn_nonconv(f"{cfg.family} fit for {fm.task}", fm.diagnostics)
    return ModelSet(data.domains.ids, data.tasks, granularity, tuple(fitted))


def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ZeroVariance("Pearson correlation undefined for constant input")
    a = a - a.mean()
    b = b - b.mean()
    return float(np.clip(a @ b / np.sqrt((a @ a) * (b @ b)), -1.0, 1.0))


def regression_fit_score(models: ModelSet, holdout: SwarmDataset) -> float:
    """Pearson correlation of predicted and observed scores, pooled over tasks and mixtures."""
    if holdout.domains.ids != tuple(models.ids):
        raise ValidationError("holdout is over a different domain set")
    if set(holdout.tasks) != set(models.tasks):
        raise ValidationError("holdout tasks differ from the fitted tasks")
    pred = models.predict_tasks(holdout.X)
    truth = np.column_stack([holdout.scores(t) for t in models.tasks])
    return _pearson(pred, truth)


def aggregate_objective(models: ModelSet, granularity: GranularitySpec | None = None) -> Objective:
    """The surrogate objective ``sum_unit weight * f_unit(p)``.

    All-log-linear model sets collapse into a single vectorised objective.
    """
    granularity = granularity or models.granularity
    units = granularity.units(models.tasks)
    parts, weights = [], []
    for name, _, w in units:
        fm = models.unit(name)
        parts.append(fm.model)
        weights.append(w)
    if all(isinstance(p, LogLinear) for p in parts):
        return LogLinearObjective([p.c for p in parts], np.vstack([p.a for p in parts]), weights)
    return WeightedSum(parts, weights)


def loglinear_matrix(models) -> tuple:
    """``(c, A)`` stacked over units for log-linear model sets or truths."""
    if hasattr(models, "A") and hasattr(models, "c") and not isinstance(models, ModelSet):
        return np.asarray(models.c), np.asarray(models.A)
    fms = models.models if isinstance(models, ModelSet) else models
    if not all(isinstance(fm.model, LogLinear) for fm in fms):
        raise WrongFamily("coupling analysis needs log-linear models")
    return np.array([fm.model.c for fm in fms]), np.vstack([fm.model.a for fm in fms])

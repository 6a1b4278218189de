"""Differentiable objectives over mixture vectors.

An objective maps a weight vector ``p`` (length ``m``) to a scalar. The
solvers only need :meth:`value_grad` and :meth:`values`; analysis code also
uses :meth:`hess`.
"""

from __future__ import annotations

import numpy as np

from . import _kernels


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


class Objective:
    m: int = 0
    convex: bool = False

    def value(self, p) -> float:
        return self.value_grad(p)[0]

    def grad(self, p) -> np.ndarray:
        return self.value_grad(p)[1]

    def value_grad(self, p):
        raise NotImplementedError

    def values(self, P) -> np.ndarray:
        return np.array([self.value(p) for p in np.atleast_2d(P)])

    def hess(self, p, h: float = 1e-6) -> np.ndarray:
        """Central-difference Hessian from the analytic gradient."""
        p = _f64(p)
        H = np.empty((self.m, self.m))
        for j in range(self.m):
            e = np.zeros(self.m)
            e[j] = h
            H[:, j] = (self.grad(p + e) - self.grad(p - e)) / (2 * h)
        return 0.5 * (H + H.T)

    def __neg__(self):
        return Scaled(self, -1.0)


class LogLinearObjective(Objective):
    """``sum_i w_i (c_i + exp(A_i . p))``; convex in ``p``."""

    convex = True

    def __init__(self, c, A, w=None):
        self.A = _f64(np.atleast_2d(A))
        n, self.m = self.A.shape
        self.c = _f64(np.broadcast_to(np.asarray(c, dtype=np.float64), (n,)))
        self.w = _f64(np.full(n, 1.0 / n) if w is None else w)

    def value_grad(self, p):
        v, g = _kernels.loglinear_value_grad(self.w, self.c, self.A, _f64(p))
        return float(v), np.asarray(g)

    def values(self, P):
        return np.asarray(_kernels.loglinear_values(self.w, self.c, self.A, _f64(np.atleast_2d(P))))

    def hess(self, p, h=None):
        e = np.exp(self.A @ _f64(p))
        return (self.A * (self.w * e)[:, None]).T @ self.A

    def compose(self, E) -> "LogLinearObjective":
        """Objective ``r -> f(E r)`` for a linear map ``E`` (full x reduced)."""
        return LogLinearObjective(self.c, self.A @ np.asarray(E, dtype=np.float64), self.w)

    def without_offsets(self) -> "LogLinearObjective":
        return LogLinearObjective(np.zeros_like(self.c), self.A, self.w)


class Composed(Objective):
    """``r -> f(E r)`` for an arbitrary objective ``f``."""

    def __init__(self, inner: Objective, E):
        self.inner = inner
        self.E = _f64(E)
        self.m = self.E.shape[1]
        self.convex = inner.convex

    def value_grad(self, r):
        v, g = self.inner.value_grad(self.E @ _f64(r))
        return v, self.E.T @ g

    def values(self, R):
        return self.inner.values(np.atleast_2d(R) @ self.E.T)

    def hess(self, r, h=1e-6):
        return self.E.T @ self.inner.hess(self.E @ _f64(r)) @ self.E


class Scaled(Objective):
    def __init__(self, inner: Objective, s: float):
        self.inner, self.s, self.m = inner, float(s), inner.m
        self.convex = inner.convex and self.s >= 0

    def value_grad(self, p):
        v, g = self.inner.value_grad(p)
        return self.s * v, self.s * g

    def values(self, P):
        return self.s * self.inner.values(P)

    def hess(self, p, h=1e-6):
        return self.s * self.inner.hess(p)


class WeightedSum(Objective):
    """``sum_k w_k f_k(p)`` over component objectives."""

    def __init__(self, parts, weights):
        self.parts = list(parts)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.m = self.parts[0].m
        self.convex = all(p.convex for p in self.parts) and bool(np.all(self.weights >= 0))

    def value_grad(self, p):
        v, g = 0.0, np.zeros(self.m)
        for w, f in zip(self.weights, self.parts):
            fv, fg = f.value_grad(p)
            v += w * fv
            g += w * fg
        return v, g

    def values(self, P):
        return sum(w * f.values(P) for w, f in zip(self.weights, self.parts))

    def hess(self, p, h=1e-6):
        return sum(w * f.hess(p) for w, f in zip(self.weights, self.parts))

"""Hot numeric kernels.

Each kernel exists twice: a vectorised numpy version (``*_np``) and a numba
``@njit`` loop version (``*_nb``). The public names at the bottom of the module
point at the numba versions unless ``MIXOPT_DISABLE_NUMBA`` is set to a truthy
value or numba cannot be imported. Both paths are tested against each other.
"""

import os

import numpy as np

_BISECT_ITERS = 200


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _env_flag("MIXOPT_DISABLE_NUMBA")


# ---------------------------------------------------------------------------
# capped simplex projection
# ---------------------------------------------------------------------------


def project_capped_simplex_scaled_np(v, caps, s):
    """Projection of ``v`` onto {p : sum p = 1, 0 <= p <= caps} in the metric diag(1/s).

    The solution is ``clip(v - tau * s, 0, caps)``; ``s = 1`` gives the
    Euclidean projection. Returns NaN when the caps sum to less than one.
    """
    v = np.asarray(v, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if caps.sum() < 1.0 - 1e-12:
        return np.full(v.shape, np.nan)
    lo = np.min((v - caps) / s)
    hi = np.max(v / s)
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if np.clip(v - mid * s, 0.0, caps).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    tau = 0.5 * (lo + hi)
    shifted = v - tau * s
    free = (shifted > 0.0) & (shifted < caps)
    if free.any():
        # exact tau on the identified face
        budget = 1.0 - caps[shifted >= caps].sum()
        tau = (v[free].sum() - budget) / s[free].sum()
    return np.clip(v - tau * s, 0.0, caps)


def project_capped_simplex_np(v, caps):
    """Euclidean projection of ``v`` onto {p : sum p = 1, 0 <= p <= caps}."""
    v = np.asarray(v, dtype=np.float64)
    return project_capped_simplex_scaled_np(v, caps, np.ones_like(v))


def _project_capped_simplex_scaled_loop(v, caps, s):
    m = v.shape[0]
    out = np.empty(m)
    total_cap = 0.0
    for j in range(m):
        total_cap += caps[j]
    if total_cap < 1.0 - 1e-12:
        for j in range(m):
            out[j] = np.nan
        return out
    lo = (v[0] - caps[0]) / s[0]
    hi = v[0] / s[0]
    for j in range(1, m):
        if (v[j] - caps[j]) / s[j] < lo:
            lo = (v[j] - caps[j]) / s[j]
        if v[j] / s[j] > hi:
            hi = v[j] / s[j]
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        tot = 0.0
        for j in range(m):
            x = v[j] - mid * s[j]
            if x > caps[j]:
                x = caps[j]
            if x > 0.0:
                tot += x
        if tot > 1.0:
            lo = mid
        else:
            hi = mid
    tau = 0.5 * (lo + hi)
    s_free = 0.0
    free_sum = 0.0
    cap_sum = 0.0
    for j in range(m):
        x = v[j] - tau * s[j]
        if x >= caps[j]:
            cap_sum += caps[j]
        elif x > 0.0:
            s_free += s[j]
            free_sum += v[j]
    if s_free > 0.0:
        tau = (free_sum - (1.0 - cap_sum)) / s_free
    for j in range(m):
        x = v[j] - tau * s[j]
        if x > caps[j]:
            x = caps[j]
        if x < 0.0:
            x = 0.0
        out[j] = x
    return out


def _project_capped_simplex_loop(v, caps):
    return _project_capped_simplex_scaled_loop(v, caps, np.ones(v.shape[0]))


# ---------------------------------------------------------------------------
# log-linear surrogate sums:  sum_i w_i (c_i + exp(A_i . p))
# ---------------------------------------------------------------------------


def loglinear_value_grad_np(w, c, A, p):
    e = np.exp(A @ p)
    return float(w @ (c + e)), (w * e) @ A


def _loglinear_value_grad_loop(w, c, A, p):
    n, m = A.shape
    grad = np.zeros(m)
    val = 0.0
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += A[i, j] * p[j]
        e = np.exp(s)
        val += w[i] * (c[i] + e)
        we = w[i] * e
        for j in range(m):
            grad[j] += we * A[i, j]
    return val, grad


def loglinear_values_np(w, c, A, P):
    return (c + np.exp(P @ A.T)) @ w


def _loglinear_values_loop(w, c, A, P):
    # one GEMM, then a fused exp / weighted sum pass
    S = np.dot(P, np.ascontiguousarray(A.T))
    k, n = S.shape
    base = 0.0
    for i in range(n):
        base += w[i] * c[i]
    out = np.empty(k)
    for r in range(k):
        acc = base
        for i in range(n):
            acc += w[i] * np.exp(S[r, i])
        out[r] = acc
    return out


# ---------------------------------------------------------------------------
# log-linear least squares: theta = [log c, A]; residual c + exp(P A) - y
# ---------------------------------------------------------------------------


def loglinear_residual_jac_np(theta, P, y):
    c = np.exp(theta[0])
    e = np.exp(P @ theta[1:])
    r = c + e - y
    J = np.empty((P.shape[0], theta.shape[0]))
    J[:, 0] = c
    J[:, 1:] = e[:, None] * P
    return r, J


def _loglinear_residual_jac_loop(theta, P, y):
    k, m = P.shape
    c = np.exp(theta[0])
    r = np.empty(k)
    J = np.empty((k, m + 1))
    for row in range(k):
        s = 0.0
        for j in range(m):
            s += theta[j + 1] * P[row, j]
        e = np.exp(s)
        r[row] = c + e - y[row]
        J[row, 0] = c
        for j in range(m):
            J[row, j + 1] = e * P[row, j]
    return r, J


if HAVE_NUMBA:
    project_capped_simplex_scaled_nb = njit(cache=True)(_project_capped_simplex_scaled_loop)

    @njit(cache=True)
    def project_capped_simplex_nb(v, caps):
        return project_capped_simplex_scaled_nb(v, caps, np.ones(v.shape[0]))

    loglinear_value_grad_nb = njit(cache=True)(_loglinear_value_grad_loop)
    loglinear_values_nb = njit(cache=True)(_loglinear_values_loop)
    loglinear_residual_jac_nb = njit(cache=True)(_loglinear_residual_jac_loop)
else:  # pragma: no cover
    project_capped_simplex_scaled_nb = _project_capped_simplex_scaled_loop
    project_capped_simplex_nb = _project_capped_simplex_loop
    loglinear_value_grad_nb = _loglinear_value_grad_loop
    loglinear_values_nb = _loglinear_values_loop
    loglinear_residual_jac_nb = _loglinear_residual_jac_loop


def backend():
    """Name of the active kernel backend: ``"numba"`` or ``"numpy"``."""
    return "numba" if USE_NUMBA else "numpy"


if USE_NUMBA:
    project_capped_simplex = project_capped_simplex_nb
    project_capped_simplex_scaled = project_capped_simplex_scaled_nb
    loglinear_value_grad = loglinear_value_grad_nb
    loglinear_residual_jac = loglinear_residual_jac_nb
else:
    project_capped_simplex = project_capped_simplex_np
    project_capped_simplex_scaled = project_capped_simplex_scaled_np
    loglinear_value_grad = loglinear_value_grad_np
    loglinear_residual_jac = loglinear_residual_jac_np

# the batched product is BLAS-bound; numpy beats the compiled loop here
loglinear_values = loglinear_values_np

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixopt import _kernels as K

from oracles import project_breakpoints

BACKENDS = ["np", "nb"]


def kernel(name, backend):
    return getattr(K, f"{name}_{backend}")


@st.composite
def capped_problem(draw):
    m = draw(st.integers(1, 12))
    v = np.array(draw(st.lists(st.floats(-5, 5), min_size=m, max_size=m)))
    caps = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=m, max_size=m)))
    if caps.sum() < 1.0:
        caps = np.minimum(1.0, caps + (1.0 - caps.sum()) / m + 1e-9)
    return v, caps


@pytest.mark.parametrize("backend", BACKENDS)
@given(prob=capped_problem())
def test_projection_matches_breakpoint_oracle(backend, prob):
    v, caps = prob
    p = kernel("project_capped_simplex", backend)(v, caps)
    ref = project_breakpoints(v, caps)
    assert np.max(np.abs(p - ref)) <= 1e-9
    assert abs(p.sum() - 1) <= 1e-9
    assert np.all(p >= 0) and np.all(p <= caps + 1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
@given(prob=capped_problem(), seed=st.integers(0, 2**31))
def test_scaled_projection_matches_breakpoint_oracle(backend, prob, seed):
    v, caps = prob
    s = np.random.default_rng(seed).uniform(1e-3, 10.0, size=v.shape)
    p = kernel("project_capped_simplex_scaled", backend)(v, caps, s)
    ref = project_breakpoints(v, caps, s)
    assert np.max(np.abs(p - ref)) <= 1e-9
    assert abs(p.sum() - 1) <= 1e-9
    assert np.all(p >= 0) and np.all(p <= caps + 1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
@given(prob=capped_problem())
def test_projection_idempotent(backend, prob):
    v, caps = prob
    f = kernel("project_capped_simplex", backend)
    p = f(v, caps)
    assert np.max(np.abs(f(p, caps) - p)) <= 1e-10


@pytest.mark.parametrize("backend", BACKENDS)
def test_projection_examples(backend):
    f = kernel("project_capped_simplex", backend)
    assert f(np.array([10.0, 0.0]), np.array([0.6, 1.0])) == pytest.approx([0.6, 0.4], abs=1e-12)
    assert f(np.array([0.5, 0.5]), np.ones(2)) == pytest.approx([0.5, 0.5], abs=1e-12)
    inner = np.array([0.2, 0.3, 0.5])
    assert np.max(np.abs(f(inner, np.ones(3)) - inner)) <= 1e-10


@pytest.mark.parametrize("backend", BACKENDS)
@given(prob=capped_problem())
def test_projection_kkt(backend, prob):
    # p = clip(v - tau) for one tau: free coordinates share the same v - p
    v, caps = prob
    p = kernel("project_capped_simplex", backend)(v, caps)
    free = (p > 1e-12) & (p < caps - 1e-12)
    if free.sum() >= 2:
        shift = v[free] - p[free]
        assert np.ptp(shift) <= 1e-9
        tau = shift.mean()
        live = caps > 1e-9
        lower = live & (p <= 1e-12)
        upper = live & (p >= caps - 1e-12)
        assert np.all(v[lower] - tau <= 1e-9)
        assert np.all(v[upper] - tau >= caps[upper] - 1e-9)


def random_loglinear(rng, m=5, n=3, k=7):
    A = rng.normal(size=(n, m))
    c = rng.uniform(0.2, 1.0, size=n)
    w = rng.dirichlet(np.ones(n))
    p = rng.dirichlet(np.ones(m))
    P = rng.dirichlet(np.ones(m), size=k)
    return w, c, A, p, P


@given(st.integers(0, 2**31))
def test_backends_agree(seed):
    rng = np.random.default_rng(seed)
    w, c, A, p, P = random_loglinear(rng)
    v0, g0 = K.loglinear_value_grad_np(w, c, A, p)
    v1, g1 = K.loglinear_value_grad_nb(w, c, A, p)
    assert v0 == pytest.approx(v1, rel=1e-12)
    assert np.allclose(g0, g1, rtol=1e-12, atol=1e-14)
    assert np.allclose(K.loglinear_values_np(w, c, A, P), K.loglinear_values_nb(w, c, A, P), rtol=1e-12)
    theta = np.concatenate([[np.log(0.4)], A[0]])
    y = rng.uniform(0.5, 2.0, size=P.shape[0])
    r0, J0 = K.loglinear_residual_jac_np(theta, P, y)
    r1, J1 = K.loglinear_residual_jac_nb(theta, P, y)
    assert np.allclose(r0, r1, rtol=1e-12, atol=1e-14)
    assert np.allclose(J0, J1, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("backend", BACKENDS)
@given(seed=st.integers(0, 2**31))
def test_value_grad_finite_differences(backend, seed):
    rng = np.random.default_rng(seed)
    w, c, A, p, _ = random_loglinear(rng)
    f = kernel("loglinear_value_grad", backend)
    _, g = f(w, c, A, p)
    h = 1e-6
    for j in range(len(p)):
        e = np.zeros_like(p)
        e[j] = h
        fd = (f(w, c, A, p + e)[0] - f(w, c, A, p - e)[0]) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("backend", BACKENDS)
def test_residual_jacobian_finite_differences(backend, rng):
    P = rng.dirichlet(np.ones(4), size=9)
    y = rng.uniform(1, 2, size=9)
    theta = np.array([np.log(0.3), 0.5, -0.2, 0.1, 0.8])
    f = kernel("loglinear_residual_jac", backend)
    _, J = f(theta, P, y)
    h = 1e-6
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        fd = (f(theta + e, P, y)[0] - f(theta - e, P, y)[0]) / (2 * h)
        assert np.allclose(J[:, j], fd, rtol=1e-6, atol=1e-8)


def test_env_flag_selects_numpy():
    code = "from mixopt import _kernels as K; print(K.backend(), K.project_capped_simplex is K.project_capped_simplex_np)"
    env = dict(os.environ, MIXOPT_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()
    assert out == ["numpy", "True"]
    env["MIXOPT_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()
    assert out[0] == ("numba" if K.HAVE_NUMBA else "numpy")


def test_solver_agrees_across_backends():
    code = (
        "import numpy as np;"
        "from mixopt.oracle import GroundTruthModel, truth_optimum;"
        "g = GroundTruthModel.random([f'd{j}' for j in range(6)], 4, seed=3);"
        "print(' '.join(repr(float(x)) for x in truth_optimum(g, lam=0.05).weights))"
    )
    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, MIXOPT_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        outs.append(np.array([float(x) for x in res.stdout.split()]))
    assert np.max(np.abs(outs[0] - outs[1])) <= 1e-8

import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsqp_rti import kernels
from dsqp_rti.kernels import get_backend
from dsqp_rti.pendulum import PendulumChainParams

PARAMS = PendulumChainParams().kernel_params

try:
    compiled = get_backend("compiled")
except ImportError:
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")
python = get_backend("python")
finite = st.floats(-3.0, 3.0, allow_nan=False)
sides = st.sampled_from([(True, True), (True, False), (False, True), (False, False)])


def test_active_backend_is_compiled_when_built():
    assert kernels.BACKEND == ("compiled" if compiled is not None else "python")


def test_environment_forces_python_backend():
    code = "from dsqp_rti import kernels; print(kernels.BACKEND)"
    env = {"DSQP_RTI_BACKEND": "python", "PATH": ""}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend():
    with pytest.raises(ValueError):
        get_backend("fortran")


@needs_compiled
@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=4, max_size=4), finite, finite, finite, sides)
def test_rhs_and_step_agree(x, u, ql, qr, side):
    x = np.array(x)
    a = python.pendulum_rhs(x, u, ql, qr, *side, PARAMS)
    b = compiled.pendulum_rhs(x, u, ql, qr, *side, PARAMS)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)
    a = python.rk4_frozen(x, u, ql, qr, *side, 0.04, PARAMS)
    b = compiled.rk4_frozen(x, u, ql, qr, *side, 0.04, PARAMS)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


@needs_compiled
@pytest.mark.parametrize("side", [(True, True), (True, False), (False, True), (False, False)])
@pytest.mark.parametrize("with_hessian", [False, True])
def test_batch_agrees(side, with_hessian):
    rng = np.random.default_rng(0)
    X, P, NU = rng.normal(size=(12, 4)), rng.normal(size=(12, 3)), rng.normal(size=(12, 4))
    nu = NU if with_hessian else None
    a = python.rk4_frozen_batch(X, P, *side, 0.04, PARAMS, nu)
    b = compiled.rk4_frozen_batch(X, P, *side, 0.04, PARAMS, nu)
    for x, y in zip(a, b):
        if x is None:
            assert y is None
        else:
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", ["python", pytest.param("compiled", marks=needs_compiled)])
def test_batch_jacobian_matches_differences(backend):
    k = get_backend(backend)
    rng = np.random.default_rng(1)
    X, P = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))
    xn, J, _ = k.rk4_frozen_batch(X, P, True, True, 0.04, PARAMS)
    for b in range(3):
        np.testing.assert_allclose(xn[b], k.rk4_frozen(X[b], P[b, 0], P[b, 1], P[b, 2], True, True, 0.04, PARAMS),
                                   atol=1e-14)
        w = np.concatenate([X[b], P[b]])
        fd = np.zeros((4, 7))
        for j in range(7):
            e = np.zeros(7)
            e[j] = 1e-6
            hi, lo = w + e, w - e
            fd[:, j] = (k.rk4_frozen(hi[:4], hi[4], hi[5], hi[6], True, True, 0.04, PARAMS)
                        - k.rk4_frozen(lo[:4], lo[4], lo[5], lo[6], True, True, 0.04, PARAMS)) / 2e-6
        np.testing.assert_allclose(J[b], fd, atol=1e-7)

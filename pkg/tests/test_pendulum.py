import numpy as np
import pytest

from dsqp_rti.errors import NotStabilizing
from dsqp_rti.pendulum import (
    PendulumChainParams,
    beta2_search,
    chain_rhs,
    design_terminal,
    frozen_step,
    linearize_discrete,
    pendulum_ode,
    plant_step,
    riccati_design,
    riccati_residual,
    rk4_step,
    uncoupled_linearization,
)

P = PendulumChainParams()
Q_I = np.diag([1.0, 1e-4, 10.0, 1e-4])
R_I = np.array([[1e-3]])


def energy(x, p=P):
    """Cart plus uniform rod; the rod's centre of mass sits at q - (l/2) sin(phi)."""
    q, v, phi, om = x
    half = 0.5 * p.l
    vx = v - half * np.cos(phi) * om
    vy = -half * np.sin(phi) * om
    return (0.5 * p.M_c * v**2 + 0.5 * p.m * (vx**2 + vy**2) + p.m * p.l**2 / 24 * om**2
            + p.m * p.g * half * np.cos(phi))


def test_upright_equilibrium():
    assert np.all(pendulum_ode(np.zeros(4), 0.0, params=P) == 0)


def test_hanging_equilibrium():
    np.testing.assert_allclose(pendulum_ode([0, 0, np.pi, 0], 0.0, params=P), 0.0, atol=1e-14)


def test_horizontal_rod_from_rest():
    xd = pendulum_ode([0, 0, np.pi / 2, 0], 0.0, params=P)
    assert xd[1] == pytest.approx(0.0, abs=1e-14)
    assert xd[3] == pytest.approx(73.575, abs=1e-12)


def test_springs_only_with_neighbours():
    x = np.array([0.3, 0, 0, 0])
    free = pendulum_ode(x, 0.0, params=P)
    left = pendulum_ode(x, 0.0, q_left=0.0, params=P)
    both = pendulum_ode(x, 0.0, q_left=0.0, q_right=0.0, params=P)
    denom = P.M_c + P.m - 0.75 * P.m
    assert free[1] == 0
    assert left[1] == pytest.approx(-P.k_spring * 0.3 / denom)
    assert both[1] == pytest.approx(-2 * P.k_spring * 0.3 / denom)


def test_chain_rhs_matches_single_cart_field():
    rng = np.random.default_rng(0)
    X, U = rng.standard_normal((3, 4)), rng.standard_normal(3)
    F = chain_rhs(X, U, PendulumChainParams(S=3))
    np.testing.assert_allclose(F[0], pendulum_ode(X[0], U[0], None, X[1, 0], P), atol=1e-14)
    np.testing.assert_allclose(F[1], pendulum_ode(X[1], U[1], X[0, 0], X[2, 0], P), atol=1e-14)
    np.testing.assert_allclose(F[2], pendulum_ode(X[2], U[2], X[1, 0], None, P), atol=1e-14)


def test_rk4_zero_field():
    x = np.array([1.0, -2.0])
    assert np.all(rk4_step(lambda x, u: np.zeros_like(x), x, 0.0, 0.1) == x)


def test_rk4_scalar_decay():
    x1 = rk4_step(lambda x, u: -x, np.array([1.0]), 0.0, 0.1)
    assert x1[0] == pytest.approx(1 - 0.1 + 0.005 - 1 / 6000 + 1 / 240000, abs=1e-15)
    assert x1[0] == pytest.approx(0.90483750, abs=1e-8)


def test_rk4_order_on_pendulum():
    x0 = np.array([0.1, 0.0, 2.5, 0.0])
    T = 0.4
    field = lambda x, u: pendulum_ode(x, u, params=P)

    def integrate(h, n):
        x = x0.copy()
        for _ in range(n):
            x = rk4_step(field, x, 1.0, h)
        return x

    ref = integrate(0.04 / 1000, 10 * 1000)
    errs = [np.linalg.norm(integrate(h, int(round(T / h))) - ref) for h in (0.04, 0.02, 0.01)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 3.7


def test_frozen_step_holds_neighbours_fixed():
    x = np.array([0.2, 0.1, 0.3, 0.0])
    got = frozen_step(x, 1.0, -0.5, 0.4, 0.04, P)
    ref = rk4_step(lambda x, u: pendulum_ode(x, u, -0.5, 0.4, P), x, 1.0, 0.04)
    np.testing.assert_allclose(got, ref, atol=1e-14)


def test_equilibria_are_fixed_points():
    params = PendulumChainParams(S=3)
    for phi in (0.0, np.pi):
        X = np.zeros((3, 4))
        X[:, 2] = phi
        np.testing.assert_allclose(plant_step(X, np.zeros(3), 0.04, params), X, atol=1e-12)


def test_energy_drift_single_cart():
    x = np.array([0.0, 0.5, 2.0, 1.0])
    e0 = energy(x)
    field = lambda x, u: pendulum_ode(x, u, params=P)
    for _ in range(1000):
        x = rk4_step(field, x, 0.0, 1e-3)
    assert abs(energy(x) - e0) <= 1e-6 * abs(e0)


def test_linearize_linear_map():
    rng = np.random.default_rng(1)
    F, G = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
    A, B = linearize_discrete(lambda x, u: F @ x + G @ u, np.zeros(3), np.zeros(2))
    np.testing.assert_allclose(A, F, atol=1e-9)
    np.testing.assert_allclose(B, G, atol=1e-9)


def test_uncoupled_linearization_is_unstable():
    A, B = uncoupled_linearization(P, 0.04)
    assert np.max(np.abs(np.linalg.eigvals(A))) > 1.0
    assert B.shape == (4, 1)


def test_coupled_spring_entry():
    params = PendulumChainParams(S=2)
    f = lambda x, u: chain_rhs(x.reshape(2, 4), u, params).ravel()
    A, _ = linearize_discrete(f, np.zeros(8), np.zeros(2))
    # d qdd_1 / d q_2
    assert A[1, 4] == pytest.approx(P.k_spring / (P.M_c + P.m - 0.75 * P.m), rel=1e-7)


def test_riccati_deadbeat():
    P_, K = riccati_design([[0.0]], [[1.0]], [[2.0]], [[1.0]])
    assert P_[0, 0] == pytest.approx(2.0)
    assert K[0, 0] == pytest.approx(0.0)


def test_riccati_golden_ratio():
    P_, K = riccati_design([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    phi = (1 + 5**0.5) / 2
    assert P_[0, 0] == pytest.approx(phi, abs=1e-9)
    assert K[0, 0] == pytest.approx(-phi / (1 + phi), abs=1e-9)


def test_riccati_pendulum():
    A, B = uncoupled_linearization(P, 0.04)
    P_, K = riccati_design(A, B, Q_I, R_I)
    assert np.max(np.abs(np.linalg.eigvals(A + B @ K))) < 1.0
    assert riccati_residual(A, B, Q_I, R_I, P_) <= 1e-9
    assert np.linalg.eigvalsh(P_).min() > 0


def test_beta2_chain_design():
    d = design_terminal(P, Q_I, R_I, 0.04, mu=1.01)
    assert d.beta2 == 1.1
    assert d.min_eig > 0
    assert d.spectral_radius < 1
    assert np.linalg.eigvalsh(d.P_blocks[0]).min() > 0
    assert d.extra["riccati_residual"] <= 1e-9


def test_beta2_lower_boundary():
    A, B = uncoupled_linearization(P, 0.04)
    P_, K = riccati_design(A, B, Q_I, R_I)
    # a tiny stage weight in the decrease test is dominated immediately
    d = beta2_search(A, B, K, P_, 1e-3 * Q_I, 1e-3 * R_I)
    assert d.beta2 == 1.0


def test_beta2_decrease_margin_monotone():
    A, B = uncoupled_linearization(P, 0.04)
    P_, K = riccati_design(A, B, Q_I, R_I)
    A_K = A + B @ K
    Q_K = Q_I + K.T @ R_I @ K
    lam = [np.linalg.eigvalsh(b * (P_ - A_K.T @ P_ @ A_K) / 1.01 - Q_K)[0] for b in (1.0, 2.0, 4.0)]
    assert lam[0] < lam[1] < lam[2]
    # the smallest eigenvalue of b X - Y is concave in b
    assert lam[1] >= (2 * lam[0] + lam[2]) / 3 - 1e-12


def test_beta2_rejects_unstable_closed_loop():
    A, B = uncoupled_linearization(P, 0.04)
    with pytest.raises(NotStabilizing):
        beta2_search(A, B, np.zeros((1, 4)), np.eye(4), Q_I, R_I)

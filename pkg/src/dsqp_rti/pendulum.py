"""Spring-coupled inverted pendulums on carts.

State of cart ``i`` is ``(q, qdot, phi, phidot)`` with ``phi`` measured from
the upright position; the input is the cart force. Neighbouring carts are
joined by linear springs. Two discretisations are provided: the fully coupled
RK4 plant used for closed-loop simulation, and the frozen-neighbour RK4 step
used inside the optimal control problem (input and neighbour positions held
constant over the step).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels
from .errors import NoConvergence, NotStabilizing

__all__ = [
    "PendulumChainParams",
    "PendulumModel",
    "TerminalDesign",
    "beta2_search",
    "chain_rhs",
    "coupled_linearization",
    "design_terminal",
    "frozen_step",
    "linearize_discrete",
    "pendulum_ocp_spec",
    "pendulum_ode",
    "plant_step",
    "riccati_design",
    "riccati_residual",
    "rk4_step",
    "uncoupled_linearization",
]


@dataclass(frozen=True)
class PendulumChainParams:
    """Physical parameters of the chain (SI units)."""

    S: int = 20
    M_c: float = 2.0
    m: float = 0.25
    l: float = 0.2
    k_spring: float = 0.1
    g: float = 9.81
    u_max: float = 100.0

    def __post_init__(self):
        for name in ("M_c", "m", "l", "g", "u_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.k_spring < 0 or self.S < 1:
            raise ValueError("k_spring must be nonnegative and S >= 1")

    @property
    def kernel_params(self):
        return (self.M_c, self.m, self.l, self.k_spring, self.g)


def pendulum_ode(x, u, q_left=None, q_right=None, params=PendulumChainParams()):
    """Continuous-time right-hand side of one cart-pendulum.

    A spring force is included only for neighbours that are given.
    """
    return kernels.pendulum_rhs(
        np.asarray(x, dtype=float),
        float(u),
        0.0 if q_left is None else float(q_left),
        0.0 if q_right is None else float(q_right),
        q_left is not None,
        q_right is not None,
        params.kernel_params,
    )


def chain_rhs(X, U, params):
    """Right-hand side of the whole chain; ``X`` has shape (S, 4), ``U`` shape (S,)."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float).reshape(-1)
    q, v, phi, om = X.T
    spring = np.zeros_like(q)
    d = params.k_spring * (q[1:] - q[:-1])
    spring[:-1] += d
    spring[1:] -= d
    s, c = np.sin(phi), np.cos(phi)
    m, l, g = params.m, params.l, params.g
    num = U + 0.75 * m * g * s * c - 0.5 * m * l * om**2 * s + spring
    qdd = num / (params.M_c + m - 0.75 * m * c**2)
    phidd = 1.5 * g / l * s + 1.5 / l * c * qdd
    return np.column_stack([v, qdd, om, phidd])


def rk4_step(field, x, u, h, *frozen):
    """Classical RK4 step of ``field(x, u, *frozen)`` with ``u`` and ``frozen`` held constant."""
    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(field(x, u, *frozen))
    k2 = np.asarray(field(x + 0.5 * h * k1, u, *frozen))
    k3 = np.asarray(field(x + 0.5 * h * k2, u, *frozen))
    k4 = np.asarray(field(x + h * k3, u, *frozen))
    out = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite state after RK4 step")
    return out


def plant_step(X, U, delta, params):
    """Advance the fully coupled chain by one RK4 step of length ``delta``."""
    return rk4_step(lambda x, u: chain_rhs(x, u, params), X, U, delta)


def frozen_step(x, u, q_left, q_right, h, params):
    """Frozen-neighbour RK4 step of one pendulum (``None`` means no neighbour)."""
    return kernels.rk4_frozen(
        np.asarray(x, dtype=float),
        float(u),
        0.0 if q_left is None else float(q_left),
        0.0 if q_right is None else float(q_right),
        q_left is not None,
        q_right is not None,
        h,
        params.kernel_params,
    )


class PendulumModel:
    """Frozen-neighbour discrete dynamics of one cart in the chain.

    Neighbour arguments ``V`` hold the positions of the present neighbours in
    ascending index order (left before right).
    """

    n_x = 4
    n_u = 1

    def __init__(self, params, h, has_left, has_right):
        self.params = params
        self.h = float(h)
        self.has_left = bool(has_left)
        self.has_right = bool(has_right)
        self.n_v = int(has_left) + int(has_right)
        self._cols = np.array([0, 1, 2, 3, 4] + [5] * has_left + [6] * has_right)

    def step_batch(self, X, U, V, NU=None):
        """Batched step with Jacobian (B, 4, 5 + n_v) and optional contracted Hessian."""
        X = np.ascontiguousarray(X, dtype=float)
        nb = X.shape[0]
        P = np.zeros((nb, 3))
        P[:, 0] = np.asarray(U, dtype=float).reshape(nb)
        V = np.asarray(V, dtype=float).reshape(nb, self.n_v)
        col = 0
        if self.has_left:
            P[:, 1] = V[:, col]
            col += 1
        if self.has_right:
            P[:, 2] = V[:, col]
        Xn, J, Hc = kernels.rk4_frozen_batch(
            X, P, self.has_left, self.has_right, self.h, self.params.kernel_params, NU
        )
        c = self._cols
        J = J[:, :, c]
        if Hc is not None:
            Hc = Hc[:, c][:, :, c]
        return Xn, J, Hc


def linearize_discrete(f, x0, u0, eps=1e-6):
    """Central finite-difference Jacobians ``(A, B)`` of ``f(x, u)`` at ``(x0, u0)``."""
    x0 = np.asarray(x0, dtype=float).ravel()
    u0 = np.asarray(u0, dtype=float).ravel()
    y0 = np.asarray(f(x0, u0)).ravel()
    A = np.empty((y0.size, x0.size))
    B = np.empty((y0.size, u0.size))
    for j in range(x0.size):
        e = np.zeros_like(x0)
        e[j] = eps
        A[:, j] = (np.ravel(f(x0 + e, u0)) - np.ravel(f(x0 - e, u0))) / (2 * eps)
    for j in range(u0.size):
        e = np.zeros_like(u0)
        e[j] = eps
        B[:, j] = (np.ravel(f(x0, u0 + e)) - np.ravel(f(x0, u0 - e))) / (2 * eps)
    return A, B


def uncoupled_linearization(params, delta, x0=None, u0=0.0):
    """Linearise one pendulum without springs, discretised by RK4 at ``delta``."""
    x0 = np.zeros(4) if x0 is None else x0

    def f(x, u):
        return frozen_step(x, u[0], None, None, delta, params)

    return linearize_discrete(f, x0, [u0])


def coupled_linearization(params, delta, X0=None, U0=None):
    """Linearise the full coupled chain (RK4 at ``delta``); returns (A, B) of size 4S."""
    S = params.S
    X0 = np.zeros(4 * S) if X0 is None else np.ravel(X0)
    U0 = np.zeros(S) if U0 is None else np.ravel(U0)

    def f(x, u):
        return plant_step(x.reshape(S, 4), u, delta, params).ravel()

    return linearize_discrete(f, X0, U0)


def riccati_residual(A, B, Q, R, P):
    """Infinity norm of the discrete algebraic Riccati equation residual at ``P``."""
    BtPA = B.T @ P @ A
    rhs = A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q
    return np.max(np.abs(P - rhs))


def riccati_design(A, B, Q, R, tol=1e-10, max_iter=200000):
    """Solve the discrete Riccati equation by fixed-point iteration from ``P = Q``.

    Returns
    -------
    P : ndarray
        Stabilising solution.
    K : ndarray
        Feedback gain with ``u = K x``.
    """
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R = np.atleast_2d(Q).astype(float), np.atleast_2d(R).astype(float)
    P = Q.copy()
    for _ in range(max_iter):
        BtPA = B.T @ P @ A
        P_next = A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q
        P_next = 0.5 * (P_next + P_next.T)
        done = np.max(np.abs(P_next - P)) <= tol
        P = P_next
        if done:
            break
    else:
        raise NoConvergence(f"Riccati iteration did not converge in {max_iter} steps")
    K = -np.linalg.solve(B.T @ P @ B + R, B.T @ P @ A)
    return P, K


@dataclass
class TerminalDesign:
    """Terminal penalty ``beta2 * x'Px / 2`` and terminal controller ``u = Kx``."""

    P_blocks: list
    K_blocks: list
    beta2: float
    mu: float
    min_eig: float
    spectral_radius: float
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "P": [np.asarray(P).tolist() for P in self.P_blocks],
            "K": [np.asarray(K).tolist() for K in self.K_blocks],
            "beta2": self.beta2,
            "mu": self.mu,
            "delta_q_min_eig": self.min_eig,
            "closed_loop_spectral_radius": self.spectral_radius,
        }


def _delta_q(A_K, P, Q_K, beta2, mu):
    dq = beta2 * (P - A_K.T @ P @ A_K) / mu - Q_K
    return 0.5 * (dq + dq.T)


def beta2_search(A, B, K, P, Q, R, mu=1.01, step=0.1, beta2_max=1000.0):
    """Smallest ``beta2 = 1 + j*step`` for which the terminal decrease matrix is positive definite."""
    A_K = A + B @ K
    rho = float(np.max(np.abs(np.linalg.eigvals(A_K))))
    if rho >= 1.0:
        raise NotStabilizing(f"A + BK has spectral radius {rho:.6f} >= 1")
    if not mu > 1.0:
        raise ValueError("mu must exceed 1")
    Q_K = Q + K.T @ R @ K
    for j in range(int(round((beta2_max - 1.0) / step)) + 1):
        beta2 = round(1.0 + j * step, 12)
        lam = float(np.linalg.eigvalsh(_delta_q(A_K, P, Q_K, beta2, mu))[0])
        if lam > 0:
            return TerminalDesign([P], [K], beta2, mu, lam, rho)
    raise NotStabilizing(f"no beta2 <= {beta2_max} makes the decrease matrix positive definite")


def design_terminal(params, Q_i, R_i, delta, mu=1.01, step=0.1):
    """Decentralised terminal design for the whole chain.

    Each cart gets its own Riccati solution from the uncoupled linearisation;
    ``beta2`` is then searched against the coupled linearisation.
    """
    Q_i, R_i = np.atleast_2d(Q_i), np.atleast_2d(R_i)
    A_i, B_i = uncoupled_linearization(params, delta)
    P_i, K_i = riccati_design(A_i, B_i, Q_i, R_i)
    S = params.S
    A, B = coupled_linearization(params, delta)
    K = scipy.linalg.block_diag(*[K_i] * S)
    P = scipy.linalg.block_diag(*[P_i] * S)
    Q = scipy.linalg.block_diag(*[Q_i] * S)
    R = scipy.linalg.block_diag(*[R_i] * S)
    design = beta2_search(A, B, K, P, Q, R, mu=mu, step=step)
    design.P_blocks = [P_i] * S
    design.K_blocks = [K_i] * S
    design.extra = {"A_i": A_i, "B_i": B_i, "riccati_residual": riccati_residual(A_i, B_i, Q_i, R_i, P_i)}
    return design


def pendulum_ocp_spec(params, N, h, Q_i, R_i, P_i, beta=1.0, beta2=1.0, copy_weight=1e-5,
                      terminal_inputs=True):
    """OCP for the chain: quadratic costs, input bounds, copies of neighbour positions.

    With ``terminal_inputs`` the input and copy trajectories run over ``N + 1``
    time points; the extra input carries the stage input weight.
    """
    from .nlp import OcpSpec

    S = params.S
    models, nbrs = [], []
    for i in range(S):
        left, right = i > 0, i < S - 1
        models.append(PendulumModel(params, h, left, right))
        nbrs.append([(j, (0,)) for j in (i - 1, i + 1) if 0 <= j < S])
    horizon = N + 1 if terminal_inputs else N
    return OcpSpec(
        models=models,
        Q=[np.atleast_2d(Q_i)] * S,
        R=[np.atleast_2d(R_i)] * S,
        P=[np.atleast_2d(P_i)] * S,
        in_neighbors=nbrs,
        N=N,
        h=h,
        beta=beta,
        beta2=beta2,
        u_min=[-params.u_max] * S,
        u_max=[params.u_max] * S,
        copy_weight=copy_weight,
        input_horizon=horizon,
        copy_horizon=horizon,
        meta={"params": params},
    )

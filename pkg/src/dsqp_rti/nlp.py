"""Partially separable NLPs with linear consensus coupling.

Each subsystem ``i`` owns a decision vector ``z_i`` with its own objective,
equality constraints ``g_i(z_i) = 0`` and inequality constraints
``h_i(z_i) <= 0``. Subsystems interact only through ``sum_i E_i z_i = c``.
For optimal control problems the coupling comes from local copies of
neighbouring state trajectories; every consensus row pairs one original
(+1) with one copy (-1).

Jacobians are stored row-wise: ``jac_g(z)`` has shape ``(n_g, n)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CouplingError, DimensionMismatch, EvaluationFailure

__all__ = [
    "FunctionSubsystem",
    "LinearModel",
    "Linearization",
    "OcpSpec",
    "OcpSubsystem",
    "PartitionedNlp",
    "PrimalDualPoint",
    "QuadraticSubsystem",
    "SubsystemProblem",
    "assemble_nlp",
    "check_derivatives",
    "kkt_residual",
]


@dataclass
class Linearization:
    """Derivative data of one subsystem at a point, as needed to build a QP."""

    f: float
    grad: np.ndarray
    g: np.ndarray
    jac_g: np.ndarray
    h: np.ndarray
    jac_h: np.ndarray
    hessian: np.ndarray
    hessian_mode: str


def _is_pd(H):
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return False
    return True


def _reduced_pd(H, jac_g):
    if jac_g.shape[0] == 0:
        return _is_pd(H)
    Z = scipy.linalg.null_space(jac_g)
    if Z.shape[1] == 0:
        return True
    return _is_pd(Z.T @ H @ Z)


class SubsystemProblem:
    """Interface for one subsystem of a partially separable NLP.

    Subclasses set ``n``, ``n_g``, ``n_h`` and implement the callbacks. The
    Gauss-Newton Hessian is optional; return ``None`` when unavailable.
    """

    n = 0
    n_g = 0
    n_h = 0

    def f(self, z):
        raise NotImplementedError

    def grad(self, z):
        raise NotImplementedError

    def g(self, z):
        return np.zeros(0)

    def jac_g(self, z):
        return np.zeros((0, self.n))

    def h(self, z):
        return np.zeros(0)

    def jac_h(self, z):
        return np.zeros((0, self.n))

    def hess_lagrangian(self, z, nu, mu):
        """Hessian of ``f + nu'g + mu'h`` with respect to ``z``."""
        raise NotImplementedError

    def gn_pair(self, z):
        """Least-squares pair ``(M, m)`` with objective ``|M z - m|^2 / 2``, or ``None``."""
        return None

    def gn_hessian(self, z):
        pair = self.gn_pair(z)
        if pair is None:
            return None
        M = pair[0]
        return M.T @ M

    def linearize(self, z, nu, mu, mode="exact", auto_test="full"):
        """Evaluate everything needed for the local QP.

        ``mode='auto'`` uses the exact Hessian when it passes a Cholesky test
        and the Gauss-Newton Hessian otherwise. ``auto_test='full'`` tests
        the full Lagrangian Hessian, ``'reduced'`` tests it on the null space
        of the equality Jacobian.
        """
        jg = self.jac_g(z)
        H, used = self._choose_hessian(z, nu, mu, jg, mode, auto_test)
        lin = Linearization(
            self.f(z), self.grad(z), self.g(z), jg, self.h(z), self.jac_h(z), H, used
        )
        _check_finite(lin)
        return lin

    def _choose_hessian(self, z, nu, mu, jg, mode, auto_test, H_exact=None):
        if mode == "gauss_newton":
            H = self.gn_hessian(z)
            if H is None:
                raise ValueError("subsystem has no Gauss-Newton Hessian")
            return H, "gauss_newton"
        if H_exact is None:
            H_exact = self.hess_lagrangian(z, nu, mu)
        if mode == "exact":
            return H_exact, "exact"
        if mode != "auto":
            raise ValueError(f"unknown Hessian mode {mode!r}")
        ok = _is_pd(H_exact) if auto_test == "full" else _reduced_pd(H_exact, jg)
        if ok:
            return H_exact, "exact"
        H = self.gn_hessian(z)
        if H is None:
            return H_exact, "exact"
        return H, "gauss_newton"


def _check_finite(lin):
    for name in ("grad", "g", "jac_g", "h", "jac_h", "hessian"):
        if not np.all(np.isfinite(getattr(lin, name))):
            raise EvaluationFailure(f"non-finite {name}")


class FunctionSubsystem(SubsystemProblem):
    """Subsystem defined by plain callables.

    ``g_hess(z, nu)`` and ``h_hess(z, mu)`` return the multiplier-weighted
    constraint Hessians; omit them for linear constraints.
    """

    def __init__(self, n, f, grad, hess, g=None, jac_g=None, g_hess=None,
                 h=None, jac_h=None, h_hess=None, gn_pair=None):
        self.n = int(n)
        self._f, self._grad, self._hess = f, grad, hess
        self._g, self._jg, self._gh = g, jac_g, g_hess
        self._h, self._jh, self._hh = h, jac_h, h_hess
        self._gn = gn_pair
        z0 = np.zeros(self.n)
        self.n_g = 0 if g is None else len(np.atleast_1d(g(z0)))
        self.n_h = 0 if h is None else len(np.atleast_1d(h(z0)))

    def f(self, z):
        return float(self._f(z))

    def grad(self, z):
        return np.asarray(self._grad(z), dtype=float).reshape(self.n)

    def g(self, z):
        return np.zeros(0) if self._g is None else np.atleast_1d(np.asarray(self._g(z), dtype=float))

    def jac_g(self, z):
        if self._g is None:
            return np.zeros((0, self.n))
        return np.asarray(self._jg(z), dtype=float).reshape(self.n_g, self.n)

    def h(self, z):
        return np.zeros(0) if self._h is None else np.atleast_1d(np.asarray(self._h(z), dtype=float))

    def jac_h(self, z):
        if self._h is None:
            return np.zeros((0, self.n))
        return np.asarray(self._jh(z), dtype=float).reshape(self.n_h, self.n)

    def hess_lagrangian(self, z, nu, mu):
        H = np.array(self._hess(z), dtype=float).reshape(self.n, self.n)
        if self._gh is not None and self.n_g:
            H = H + np.asarray(self._gh(z, nu), dtype=float)
        if self._hh is not None and self.n_h:
            H = H + np.asarray(self._hh(z, mu), dtype=float)
        return H

    def gn_pair(self, z):
        return None if self._gn is None else self._gn(z)


class QuadraticSubsystem(SubsystemProblem):
    """``min z'Hz/2 + q'z  s.t.  A_eq z = b_eq,  A_in z <= b_in``."""

    def __init__(self, H, q, A_eq=None, b_eq=None, A_in=None, b_in=None):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.n = self.H.shape[0]
        self.q = np.zeros(self.n) if q is None else np.asarray(q, dtype=float)
        self.A_eq = np.zeros((0, self.n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
        self.b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, dtype=float))
        self.A_in = np.zeros((0, self.n)) if A_in is None else np.atleast_2d(np.asarray(A_in, dtype=float))
        self.b_in = np.zeros(0) if b_in is None else np.atleast_1d(np.asarray(b_in, dtype=float))
        self.n_g, self.n_h = self.A_eq.shape[0], self.A_in.shape[0]

    def f(self, z):
        return float(0.5 * z @ self.H @ z + self.q @ z)

    def grad(self, z):
        return self.H @ z + self.q

    def g(self, z):
        return self.A_eq @ z - self.b_eq

    def jac_g(self, z):
        return self.A_eq

    def h(self, z):
        return self.A_in @ z - self.b_in

    def jac_h(self, z):
        return self.A_in

    def hess_lagrangian(self, z, nu, mu):
        return self.H

    def gn_pair(self, z):
        L = np.linalg.cholesky(self.H)
        return L.T, -np.linalg.solve(L, self.q)


class LinearModel:
    """Discrete linear dynamics ``x+ = A x + B u + A_v v`` with neighbour copies ``v``."""

    def __init__(self, A, B, A_v=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.n_x, self.n_u = self.B.shape
        self.A_v = np.zeros((self.n_x, 0)) if A_v is None else np.atleast_2d(np.asarray(A_v, dtype=float))
        self.n_v = self.A_v.shape[1]
        self._J = np.hstack([self.A, self.B, self.A_v])

    def step_batch(self, X, U, V, NU=None):
        X, U = np.atleast_2d(X), np.asarray(U, dtype=float).reshape(len(X), self.n_u)
        V = np.asarray(V, dtype=float).reshape(len(X), self.n_v)
        Xn = X @ self.A.T + U @ self.B.T + V @ self.A_v.T
        J = np.broadcast_to(self._J, (len(X),) + self._J.shape).copy()
        d = self._J.shape[1]
        Hc = None if NU is None else np.zeros((len(X), d, d))
        return Xn, J, Hc


class OcpSubsystem(SubsystemProblem):
    """One subsystem of a coupled OCP transcribed by single shooting per interval.

    Decision layout: states ``x(0..N)``, inputs ``u(0..N_u-1)``, then copies
    of in-neighbour states, one block per neighbour in ascending order, each
    block time-major. Equalities: dynamics residuals ``f(x, u, v) - x_next``
    for each interval, then the initial pin ``x(0) - x0``. Inequalities:
    input upper bounds, input lower bounds, then finite state bounds.
    """

    def __init__(self, model, Q, R, P_term, N, x0, copy_dims=(), u_min=None, u_max=None,
                 x_min=None, x_max=None, copy_weight=1e-5, input_horizon=None, copy_horizon=None):
        self.model = model
        nx, nu = model.n_x, model.n_u
        self.N = N = int(N)
        self.N_u = N if input_horizon is None else int(input_horizon)
        self.N_v = N if copy_horizon is None else int(copy_horizon)
        if self.N_u < N or (self.N_v < N and sum(copy_dims)):
            raise DimensionMismatch("input and copy horizons must cover the N dynamics steps")
        self.copy_dims = tuple(int(d) for d in copy_dims)
        n_v = sum(self.copy_dims)
        if n_v != model.n_v:
            raise DimensionMismatch(f"model expects {model.n_v} neighbour values, layout gives {n_v}")
        self.x0 = np.asarray(x0, dtype=float).reshape(nx)
        self.Q, self.R = np.atleast_2d(Q), np.atleast_2d(R)
        self.P_term = np.atleast_2d(P_term)
        self.copy_weight = float(copy_weight)

        n_xs = (N + 1) * nx
        n_us = self.N_u * nu
        self.x_idx = np.arange(n_xs).reshape(N + 1, nx)
        self.u_idx = n_xs + np.arange(n_us).reshape(self.N_u, nu)
        # copy block for neighbour b starts after the previous neighbour blocks
        cols, base = [], n_xs + n_us
        for d in self.copy_dims:
            cols.append(base + np.arange(self.N_v * d).reshape(self.N_v, d))
            base += self.N_v * d
        self.copy_blocks = cols
        self.v_idx = np.hstack(cols) if cols else np.zeros((self.N_v, 0), dtype=int)
        self.n = base
        self.n_g = N * nx + nx

        # quadratic objective: Hf is constant and block diagonal
        Hf = np.zeros((self.n, self.n))
        for t in range(N):
            Hf[np.ix_(self.x_idx[t], self.x_idx[t])] = self.Q
        Hf[np.ix_(self.x_idx[N], self.x_idx[N])] = self.P_term
        for t in range(self.N_u):
            Hf[np.ix_(self.u_idx[t], self.u_idx[t])] = self.R
        vi = self.v_idx.ravel()
        Hf[vi, vi] = self.copy_weight
        self.Hf = Hf

        # constant part of the equality Jacobian
        Jg = np.zeros((self.n_g, self.n))
        rows = np.arange(N * nx).reshape(N, nx)
        Jg[rows.ravel(), self.x_idx[1:].ravel()] = -1.0
        Jg[N * nx + np.arange(nx), self.x_idx[0]] = 1.0
        self._Jg_const = Jg
        step_cols = np.hstack([self.x_idx[:N], self.u_idx[:N], self.v_idx[:N]])
        self._step_cols = step_cols
        self._jr = rows[:, :, None]
        self._jc = step_cols[:, None, :]
        self._hr = step_cols[:, :, None]
        self._hc = step_cols[:, None, :]

        # inequalities are linear
        blocks, rhs = [], []
        ui = self.u_idx.ravel()
        for bound, sign in ((u_max, 1.0), (u_min, -1.0)):
            if bound is None:
                continue
            b = np.broadcast_to(np.asarray(bound, dtype=float), (self.N_u, nu)).ravel()
            keep = np.isfinite(b)
            A = np.zeros((keep.sum(), self.n))
            A[np.arange(keep.sum()), ui[keep]] = sign
            blocks.append(A)
            rhs.append(sign * b[keep])
        xi = self.x_idx.ravel()
        for bound, sign in ((x_max, 1.0), (x_min, -1.0)):
            if bound is None:
                continue
            b = np.broadcast_to(np.asarray(bound, dtype=float), (N + 1, nx)).ravel()
            keep = np.isfinite(b)
            A = np.zeros((keep.sum(), self.n))
            A[np.arange(keep.sum()), xi[keep]] = sign
            blocks.append(A)
            rhs.append(sign * b[keep])
        self.A_in = np.vstack(blocks) if blocks else np.zeros((0, self.n))
        self.b_in = np.concatenate(rhs) if rhs else np.zeros(0)
        self.n_h = self.A_in.shape[0]

    def with_initial_state(self, x0):
        new = object.__new__(OcpSubsystem)
        new.__dict__.update(self.__dict__)
        new.x0 = np.asarray(x0, dtype=float).reshape(self.model.n_x)
        return new

    # split helpers
    def states(self, z):
        return z[self.x_idx]

    def inputs(self, z):
        return z[self.u_idx]

    def copies(self, z):
        return z[self.v_idx]

    def _step(self, z, nu=None):
        N = self.N
        X = z[self.x_idx]
        NU = None if nu is None else nu[: N * self.model.n_x].reshape(N, self.model.n_x)
        return X, self.model.step_batch(X[:N], z[self.u_idx[:N]], z[self.v_idx[:N]], NU)

    def f(self, z):
        return float(0.5 * z @ self.Hf @ z)

    def grad(self, z):
        return self.Hf @ z

    def g(self, z):
        X, (Xn, _, _) = self._step(z)
        return np.concatenate([(Xn - X[1:]).ravel(), X[0] - self.x0])

    def jac_g(self, z):
        _, (_, J, _) = self._step(z)
        return self._assemble_jac(J)

    def _assemble_jac(self, J):
        Jg = self._Jg_const.copy()
        Jg[self._jr, self._jc] = J
        return Jg

    def h(self, z):
        return self.A_in @ z - self.b_in

    def jac_h(self, z):
        return self.A_in

    def hess_lagrangian(self, z, nu, mu):
        _, (_, _, Hc) = self._step(z, np.asarray(nu, dtype=float))
        H = self.Hf.copy()
        H[self._hr, self._hc] += Hc
        return H

    def gn_pair(self, z):
        return np.linalg.cholesky(self.Hf).T, np.zeros(self.n)

    def gn_hessian(self, z):
        return self.Hf

    def linearize(self, z, nu, mu, mode="exact", auto_test="full"):
        need_exact = mode != "gauss_newton"
        X, (Xn, J, Hc) = self._step(z, np.asarray(nu, dtype=float) if need_exact else None)
        g = np.concatenate([(Xn - X[1:]).ravel(), X[0] - self.x0])
        Jg = self._assemble_jac(J)
        H_exact = None
        if need_exact:
            H_exact = self.Hf.copy()
            H_exact[self._hr, self._hc] += Hc
        H, used = self._choose_hessian(z, nu, mu, Jg, mode, auto_test, H_exact)
        lin = Linearization(self.f(z), self.Hf @ z, g, Jg, self.h(z), self.A_in, H, used)
        _check_finite(lin)
        return lin

    def initial_guess(self, x_now=None):
        """States replicated from ``x0``, zero inputs, zero copies."""
        x = self.x0 if x_now is None else np.asarray(x_now, dtype=float)
        z = np.zeros(self.n)
        z[self.x_idx] = x
        return z


@dataclass
class PrimalDualPoint:
    """Primal-dual point ``(z, nu, mu, lam)``; ``gamma`` holds ADMM duals when present."""

    z: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    gamma: np.ndarray = None

    def copy(self):
        return PrimalDualPoint(
            self.z.copy(), self.nu.copy(), self.mu.copy(), self.lam.copy(),
            None if self.gamma is None else self.gamma.copy(),
        )

    def vector(self):
        return np.concatenate([self.z, self.nu, self.mu, self.lam])

    def distance(self, other):
        return float(np.linalg.norm(self.vector() - other.vector()))

    def split(self, nlp):
        """Per-subsystem ``(z_i, nu_i, mu_i)`` views."""
        return [
            (self.z[nlp.z_slices[i]], self.nu[nlp.g_slices[i]], self.mu[nlp.h_slices[i]])
            for i in range(nlp.S)
        ]

    @classmethod
    def from_parts(cls, nlp, parts, lam=None, gamma=None):
        z = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
        nu = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
        mu = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0)
        if z.size != nlp.n or nu.size != nlp.n_g or mu.size != nlp.n_h:
            raise DimensionMismatch("parts do not match the NLP layout")
        lam = np.zeros(nlp.n_c) if lam is None else np.asarray(lam, dtype=float)
        return cls(z, nu, mu, lam, gamma)


def _slices(sizes):
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(off[:-1], off[1:])], off


class PartitionedNlp:
    """A list of subsystems joined by ``sum_i E_i z_i = c``.

    Parameters
    ----------
    subsystems : list of SubsystemProblem
    links : list of tuple, optional
        ``(i_orig, k_orig, i_copy, k_copy)``: one consensus row with +1 at
        local index ``k_orig`` of subsystem ``i_orig`` and -1 at ``k_copy``
        of ``i_copy``.
    E : sparse or dense matrix, optional
        Explicit stacked coupling matrix (alternative to ``links``).
    c : array, optional
        Right-hand side; zero by default.
    check : bool
        Verify 2-assignment and full row rank of ``E``.
    """

    def __init__(self, subsystems, links=None, E=None, c=None, check=True):
        self.subsystems = list(subsystems)
        self.S = len(self.subsystems)
        self.z_slices, self.z_offsets = _slices([s.n for s in self.subsystems])
        self.g_slices, self.g_offsets = _slices([s.n_g for s in self.subsystems])
        self.h_slices, self.h_offsets = _slices([s.n_h for s in self.subsystems])
        self.n = int(self.z_offsets[-1])
        self.n_g = int(self.g_offsets[-1])
        self.n_h = int(self.h_offsets[-1])
        self.links = None if links is None else [tuple(int(v) for v in l) for l in links]
        if E is None:
            links = self.links or []
            rows = np.repeat(np.arange(len(links)), 2)
            cols = np.array(
                [[self.z_offsets[a] + ka, self.z_offsets[b] + kb] for a, ka, b, kb in links], dtype=int
            ).reshape(-1)
            vals = np.tile([1.0, -1.0], len(links))
            E = sp.csr_matrix((vals, (rows, cols)), shape=(len(links), self.n))
        self.E = sp.csr_matrix(E, dtype=float)
        if self.E.shape[1] != self.n:
            raise DimensionMismatch(f"E has {self.E.shape[1]} columns, expected {self.n}")
        self.n_c = self.E.shape[0]
        self.c = np.zeros(self.n_c) if c is None else np.asarray(c, dtype=float).reshape(self.n_c)
        self.E_blocks = [self.E[:, s] for s in self.z_slices]
        self._owner = np.repeat(np.arange(self.S), np.diff(self.z_offsets))
        self._graph()
        if check:
            self.check_coupling()
        self._eet = None

    def _graph(self):
        self.in_neighbors = [set() for _ in range(self.S)]
        self.out_neighbors = [set() for _ in range(self.S)]
        coo = self.E.tocoo()
        for r in range(self.n_c):
            sel = coo.row == r
            owners = self._owner[coo.col[sel]]
            vals = coo.data[sel]
            if len(owners) == 2 and owners[0] != owners[1]:
                orig = owners[vals > 0]
                copy = owners[vals < 0]
                if len(orig) == 1 and len(copy) == 1:
                    self.in_neighbors[copy[0]].add(int(orig[0]))
                    self.out_neighbors[orig[0]].add(int(copy[0]))
        self.in_neighbors = [sorted(s) for s in self.in_neighbors]
        self.out_neighbors = [sorted(s) for s in self.out_neighbors]

    def check_coupling(self, tol=1e-10):
        """Raise ``CouplingError`` unless E is 2-assigned with full row rank."""
        E = self.E.tocsr()
        for r in range(self.n_c):
            cols = E.indices[E.indptr[r]:E.indptr[r + 1]]
            vals = E.data[E.indptr[r]:E.indptr[r + 1]]
            nz = vals != 0
            owners = set(self._owner[cols[nz]].tolist())
            if len(owners) != 2 or nz.sum() != 2 or sorted(vals[nz].tolist()) != [-1.0, 1.0]:
                raise CouplingError(f"consensus row {r} is not a +1/-1 pair across two subsystems")
        if self.n_c:
            R = scipy.linalg.qr(E.T.toarray(), mode="r", pivoting=True)[0]
            d = np.abs(np.diag(R))
            if d.min() <= tol * max(1.0, d.max()):
                raise CouplingError("E does not have full row rank")

    # E E^T factorisation, shared by averaging and multiplier recovery
    @property
    def eet(self):
        if self._eet is None:
            M = (self.E @ self.E.T).tocsc()
            self._eet = spla.splu(M) if self.n_c else None
        return self._eet

    def eet_solve(self, b):
        if self.n_c == 0:
            return np.zeros(0)
        return self.eet.solve(np.asarray(b, dtype=float))

    def lambda_from_gamma(self, gamma):
        """Least-squares ``lam`` with ``E' lam = gamma`` (exact when gamma is in range(E'))."""
        return self.eet_solve(self.E @ gamma)

    def split(self, z):
        return [z[s] for s in self.z_slices]

    def stack(self, parts):
        return np.concatenate(parts) if parts else np.zeros(0)

    def owner_of(self, k):
        return int(self._owner[k])

    def with_subsystems(self, subsystems):
        """Same coupling, new subsystem objects with identical layouts."""
        new = object.__new__(PartitionedNlp)
        new.__dict__.update(self.__dict__)
        new.subsystems = list(subsystems)
        return new

    def with_initial_state(self, x_now):
        """For OCP-derived NLPs: replace every subsystem's initial state."""
        return self.with_subsystems(
            [s.with_initial_state(x) for s, x in zip(self.subsystems, x_now)]
        )

    # evaluation
    def objective(self, z):
        return sum(s.f(zi) for s, zi in zip(self.subsystems, self.split(z)))

    def gradient(self, z):
        return np.concatenate([s.grad(zi) for s, zi in zip(self.subsystems, self.split(z))])

    def g(self, z):
        return np.concatenate([s.g(zi) for s, zi in zip(self.subsystems, self.split(z))] + [np.zeros(0)])

    def h(self, z):
        return np.concatenate([s.h(zi) for s, zi in zip(self.subsystems, self.split(z))] + [np.zeros(0)])

    def lagrangian_gradient(self, p):
        parts = []
        for s, (zi, nui, mui) in zip(self.subsystems, p.split(self)):
            gr = s.grad(zi)
            if s.n_g:
                gr = gr + s.jac_g(zi).T @ nui
            if s.n_h:
                gr = gr + s.jac_h(zi).T @ mui
            parts.append(gr)
        out = self.stack(parts)
        if self.n_c:
            out = out + self.E.T @ p.lam
        return out

    def zero_point(self, z=None):
        z = np.zeros(self.n) if z is None else np.asarray(z, dtype=float)
        return PrimalDualPoint(z, np.zeros(self.n_g), np.zeros(self.n_h), np.zeros(self.n_c))

    def initial_guess(self):
        """Primal guess from each subsystem's ``initial_guess`` with consistent copies."""
        z = self.stack([s.initial_guess() for s in self.subsystems])
        return self.make_consistent(z)

    def make_consistent(self, z):
        """Overwrite every copy with its original (requires ``links``)."""
        z = np.array(z, dtype=float)
        for a, ka, b, kb in self.links or []:
            z[self.z_offsets[b] + kb] = z[self.z_offsets[a] + ka]
        return z


def kkt_residual(nlp, p):
    """Maximum violation of the KKT conditions of the NLP at ``p``."""
    if (p.z.size, p.nu.size, p.mu.size, p.lam.size) != (nlp.n, nlp.n_g, nlp.n_h, nlp.n_c):
        raise DimensionMismatch("point does not match NLP dimensions")
    h = nlp.h(p.z)
    parts = [
        nlp.lagrangian_gradient(p),
        nlp.g(p.z),
        nlp.E @ p.z - nlp.c,
        np.maximum(h, 0.0),
        p.mu * h,
        np.minimum(p.mu, 0.0),
    ]
    return float(max((np.max(np.abs(v)) if v.size else 0.0) for v in parts))


@dataclass
class DerivativeReport:
    """Worst relative finite-difference error per subsystem and block."""

    errors: list = field(default_factory=list)

    @property
    def worst(self):
        vals = [v for e in self.errors for v in e.values()]
        return max(vals) if vals else 0.0

    def ok(self, tol):
        return self.worst <= tol


def _rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(b))))


def check_derivatives(nlp, z, nu=None, mu=None, rel_step=1e-6):
    """Compare analytic derivatives with central finite differences.

    The step for coordinate ``j`` is ``rel_step * (1 + |z_j|)``. The
    Lagrangian Hessian is checked by differencing the analytic Lagrangian
    gradient, with multipliers ``nu`` and ``mu`` (random when omitted, drawn
    from a fixed seed).
    """
    rng = np.random.default_rng(0)
    nu = rng.standard_normal(nlp.n_g) if nu is None else nu
    mu = np.abs(rng.standard_normal(nlp.n_h)) if mu is None else mu
    report = DerivativeReport()
    p = PrimalDualPoint(np.asarray(z, dtype=float), nu, mu, np.zeros(nlp.n_c))
    for s, (zi, nui, mui) in zip(nlp.subsystems, p.split(nlp)):
        zi = np.array(zi, dtype=float)
        n = s.n
        fd_grad = np.empty(n)
        fd_jg = np.empty((s.n_g, n))
        fd_jh = np.empty((s.n_h, n))
        fd_hl = np.empty((n, n))

        def lag_grad(x):
            out = s.grad(x)
            if s.n_g:
                out = out + s.jac_g(x).T @ nui
            if s.n_h:
                out = out + s.jac_h(x).T @ mui
            return out

        for j in range(n):
            e = np.zeros(n)
            e[j] = rel_step * (1.0 + abs(zi[j]))
            d = 2.0 * e[j]
            fd_grad[j] = (s.f(zi + e) - s.f(zi - e)) / d
            if s.n_g:
                fd_jg[:, j] = (s.g(zi + e) - s.g(zi - e)) / d
            if s.n_h:
                fd_jh[:, j] = (s.h(zi + e) - s.h(zi - e)) / d
            fd_hl[:, j] = (lag_grad(zi + e) - lag_grad(zi - e)) / d
        fd_hl = 0.5 * (fd_hl + fd_hl.T)
        entry = {
            "grad": _rel_err(s.grad(zi), fd_grad),
            "jac_g": _rel_err(s.jac_g(zi), fd_jg),
            "jac_h": _rel_err(s.jac_h(zi), fd_jh),
            "hess_lagrangian": _rel_err(s.hess_lagrangian(zi, nui, mui), fd_hl),
        }
        gn = s.gn_pair(zi)
        if gn is not None:
            entry["gauss_newton"] = _rel_err(s.gn_hessian(zi), gn[0].T @ gn[0])
        report.errors.append(entry)
    return report


@dataclass
class OcpSpec:
    """Coupled OCP description from which a :class:`PartitionedNlp` is assembled.

    Attributes
    ----------
    models : list
        Per-subsystem discrete dynamics with ``n_x``, ``n_u``, ``n_v`` and
        ``step_batch(X, U, V, NU=None)``.
    Q, R, P : list of ndarray
        Stage and terminal weights (SPD). The terminal Hessian is
        ``beta * beta2 * P``.
    in_neighbors : list of list of (int, sequence of int)
        For subsystem ``i``: in-neighbours ``j`` (ascending) and the state
        components of ``j`` copied into ``z_i``.
    N, h : horizon and shooting interval.
    input_horizon, copy_horizon : int
        Number of input / copy time points (``N`` or ``N + 1``).
    """

    models: list
    Q: list
    R: list
    P: list
    in_neighbors: list
    N: int
    h: float
    beta: float = 1.0
    beta2: float = 1.0
    u_min: list = None
    u_max: list = None
    x_min: list = None
    x_max: list = None
    copy_weight: float = 1e-5
    input_horizon: int = None
    copy_horizon: int = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        S = len(self.models)
        for name in ("Q", "R", "P", "in_neighbors"):
            if len(getattr(self, name)) != S:
                raise DimensionMismatch(f"{name} must have one entry per subsystem")
        for name in ("Q", "R", "P"):
            for M in getattr(self, name):
                M = np.atleast_2d(M)
                if not np.allclose(M, M.T) or not _is_pd(M):
                    raise ValueError(f"{name} weights must be symmetric positive definite")
        if self.beta < 1 or self.beta2 < 1:
            raise ValueError("beta and beta2 must be >= 1")
        if self.N < 1:
            raise ValueError("horizon must be positive")

    @property
    def S(self):
        return len(self.models)

    def replace(self, **kw):
        return replace(self, **kw)


def assemble_nlp(spec, x_now):
    """Transcribe a coupled OCP into a partially separable NLP at initial states ``x_now``."""
    S = spec.S
    if len(x_now) != S:
        raise DimensionMismatch(f"expected {S} initial states, got {len(x_now)}")
    subs = []
    for i in range(S):
        model = spec.models[i]
        x0 = np.asarray(x_now[i], dtype=float)
        if x0.size != model.n_x:
            raise DimensionMismatch(f"initial state of subsystem {i} has size {x0.size}, expected {model.n_x}")
        nbrs = spec.in_neighbors[i]
        if [j for j, _ in nbrs] != sorted(j for j, _ in nbrs):
            raise CouplingError("in-neighbours must be listed in ascending order")
        pick = lambda v: None if v is None else v[i]
        subs.append(
            OcpSubsystem(
                model, spec.Q[i], spec.R[i], spec.beta * spec.beta2 * np.atleast_2d(spec.P[i]),
                spec.N, x0, copy_dims=[len(c) for _, c in nbrs],
                u_min=pick(spec.u_min), u_max=pick(spec.u_max),
                x_min=pick(spec.x_min), x_max=pick(spec.x_max),
                copy_weight=spec.copy_weight, input_horizon=spec.input_horizon,
                copy_horizon=spec.copy_horizon,
            )
        )
    links = []
    for i in range(S):
        sub = subs[i]
        for b, (j, comps) in enumerate(spec.in_neighbors[i]):
            orig = subs[j]
            if sub.N_v > orig.N + 1:
                raise DimensionMismatch("copy horizon exceeds the neighbour's state horizon")
            for t in range(sub.N_v):
                for c, comp in enumerate(comps):
                    links.append((j, int(orig.x_idx[t, comp]), i, int(sub.copy_blocks[b][t, c])))
    return PartitionedNlp(subs, links=links)

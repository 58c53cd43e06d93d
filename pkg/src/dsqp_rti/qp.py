"""Dense strictly convex QPs.

    minimize    y'Hy/2 + q'y
    subject to  A_eq y  = b_eq    | nu
                A_in y <= b_in    | mu

Solved by a primal active-set method on the equality-reduced problem: the
equalities are eliminated with a QR-based null-space basis, and each
working-set subproblem is solved in the reduced coordinates. For a fixed
working set the solution is an affine function of ``q``; these maps are
cached per working set so that re-solving a QP that only differs in ``q``
(as in ADMM) costs one matrix-vector product when the active set is
unchanged.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from .errors import DimensionMismatch, Infeasible, MaxIterations, NotStrictlyConvex, SingularKkt

__all__ = [
    "DenseQp",
    "QpSolution",
    "QpWorkspace",
    "kkt_violation",
    "solve",
    "solve_equality_kkt",
]

ACTIVATION_TOL = 1e-6


@dataclass
class DenseQp:
    H: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        self.q = np.asarray(self.q, dtype=float).reshape(n)
        if self.A_eq is None:
            self.A_eq, self.b_eq = np.zeros((0, n)), np.zeros(0)
        if self.A_in is None:
            self.A_in, self.b_in = np.zeros((0, n)), np.zeros(0)
        self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(self.A_eq.shape[0])
        self.A_in = np.asarray(self.A_in, dtype=float).reshape(-1, n)
        self.b_in = np.asarray(self.b_in, dtype=float).reshape(self.A_in.shape[0])

    @property
    def n(self):
        return self.H.shape[0]


class QpSolution:
    """Primal-dual QP solution.

    ``active_set`` lists inequalities with ``A_in y - b_in >= -activation_tol``;
    ``working_set`` is the set the solver terminated with and is what a warm
    start reuses.
    """

    __slots__ = ("y", "nu", "mu", "working_set", "iterations", "_ws", "_q", "_res")

    def __init__(self, y, nu, mu, working_set, iterations, ws=None, q=None):
        self.y, self.nu, self.mu = y, nu, mu
        self.working_set = working_set
        self.iterations = iterations
        self._ws, self._q, self._res = ws, q, None

    @property
    def eq_multipliers(self):
        return self.nu

    @property
    def ineq_multipliers(self):
        return self.mu

    @property
    def active_set(self):
        if self._ws is None or self._ws.m_in == 0:
            return ()
        s = self._ws.A_in @ self.y - self._ws.b_in
        return tuple(int(j) for j in np.flatnonzero(s >= -ACTIVATION_TOL))

    @property
    def kkt_residual(self):
        if self._res is None:
            w = self._ws
            self._res = kkt_violation(w.H, self._q, w.A_eq, w.b_eq, w.A_in, w.b_in, self.y, self.nu, self.mu)
        return self._res


def kkt_violation(H, q, A_eq, b_eq, A_in, b_in, y, nu, mu):
    """Largest violation among stationarity, feasibility, complementarity and dual sign."""
    st = H @ y + q + A_eq.T @ nu + A_in.T @ mu
    vals = [np.max(np.abs(st)) if st.size else 0.0]
    if A_eq.shape[0]:
        vals.append(np.max(np.abs(A_eq @ y - b_eq)))
    if A_in.shape[0]:
        s = A_in @ y - b_in
        vals += [max(0.0, s.max()), np.max(np.abs(mu * s)), max(0.0, -mu.min())]
    return float(max(vals))


class QpWorkspace:
    """Factorisations for a QP whose matrices and right-hand sides are fixed.

    Only the linear term ``q`` varies between calls to :meth:`solve`.
    """

    def __init__(self, H, A_eq=None, b_eq=None, A_in=None, b_in=None, tol=1e-8, max_iter=None,
                 cache_maps=True):
        qp = DenseQp(H, np.zeros(np.atleast_2d(H).shape[0]), A_eq, b_eq, A_in, b_in)
        H = 0.5 * (qp.H + qp.H.T)
        self.H, self.A_eq, self.b_eq, self.A_in, self.b_in = H, qp.A_eq, qp.b_eq, qp.A_in, qp.b_in
        self.n = n = H.shape[0]
        self.m_eq, self.m_in = qp.A_eq.shape[0], qp.A_in.shape[0]
        self.tol = tol
        self.max_iter = max_iter if max_iter is not None else 10 * (n + self.m_in) + 50

        if self.m_eq:
            Qf, Rf = scipy.linalg.qr(self.A_eq.T)
            R = Rf[: self.m_eq]
            d = np.abs(np.diag(R))
            if self.m_eq > n or d.min() <= 1e-12 * max(1.0, d.max()):
                sol, *_ = np.linalg.lstsq(self.A_eq, self.b_eq, rcond=None)
                if np.max(np.abs(self.A_eq @ sol - self.b_eq)) > tol:
                    raise Infeasible("equality constraints are inconsistent")
                raise DimensionMismatch("A_eq must have full row rank")
            self.Y, self.Z, self.R = Qf[:, : self.m_eq], Qf[:, self.m_eq:], R
            self.y_p = self.Y @ scipy.linalg.solve_triangular(R, self.b_eq, trans="T")
        else:
            self.Y, self.Z, self.R = np.zeros((n, 0)), np.eye(n), np.zeros((0, 0))
            self.y_p = np.zeros(n)
        self.r = self.Z.shape[1]
        self.Hr = self.Z.T @ H @ self.Z
        try:
            self.Lr = scipy.linalg.cho_factor(self.Hr, lower=True) if self.r else None
        except np.linalg.LinAlgError as exc:
            raise NotStrictlyConvex("reduced Hessian is not positive definite") from exc
        self.C = self.A_in @ self.Z
        self.d = self.b_in - self.A_in @ self.y_p
        self._ZtHyp = self.Z.T @ (H @ self.y_p)
        self._maps = {}
        self.cache_maps = cache_maps

    # affine solution map for a fixed working set
    def _map(self, W):
        m = self._maps.get(W)
        if m is not None:
            return m
        r, k, n = self.r, len(W), self.n
        Wl = list(W)
        CW = self.C[Wl]
        K = np.zeros((r + k, r + k))
        K[:r, :r] = self.Hr
        K[:r, r:] = CW.T
        K[r:, :r] = CW
        try:
            Kinv = np.linalg.inv(K)
        except np.linalg.LinAlgError as exc:
            raise SingularKkt("working-set KKT matrix is singular") from exc
        K11, K12, K21, K22 = Kinv[:r, :r], Kinv[:r, r:], Kinv[r:, :r], Kinv[r:, r:]
        Zt = self.Z.T
        # v = -K11 Z'q + v0,  lam = -K21 Z'q + l0
        Gv = -K11 @ Zt
        v0 = -K11 @ self._ZtHyp + K12 @ self.d[Wl]
        Gl = -K21 @ Zt
        l0 = -K21 @ self._ZtHyp + K22 @ self.d[Wl]
        Gy = self.Z @ Gv
        y0 = self.y_p + self.Z @ v0
        # nu from A_eq' nu = -(H y + q + A_W' lam), solved through the QR factor
        if self.m_eq:
            AW = self.A_in[Wl]
            T = -scipy.linalg.solve_triangular(self.R, self.Y.T, lower=False)
            Gn = T @ (self.H @ Gy + np.eye(n) + AW.T @ Gl)
            n0 = T @ (self.H @ y0 + AW.T @ l0)
        else:
            Gn, n0 = np.zeros((0, n)), np.zeros(0)
        G = np.vstack([Gy, Gn, Gl])
        s0 = np.concatenate([y0, n0, l0])
        m = (G, s0, np.array(Wl, dtype=int))
        self._maps[W] = m
        return m

    def _evaluate(self, W, q):
        if not self.cache_maps:
            return self._evaluate_direct(W, q)
        G, s0, Wi = self._map(W)
        s = G @ q + s0
        n, me = self.n, self.m_eq
        y, nu, lam = s[:n], s[n:n + me], s[n + me:]
        mu = np.zeros(self.m_in)
        mu[Wi] = lam
        return y, nu, mu, lam

    def _evaluate_direct(self, W, q):
        """Same result as the cached map, by one solve per call (for one-off QPs)."""
        Wl = list(W)
        r, k = self.r, len(Wl)
        CW = self.C[Wl]
        K = np.zeros((r + k, r + k))
        K[:r, :r] = self.Hr
        K[:r, r:] = CW.T
        K[r:, :r] = CW
        rhs = np.concatenate([-(self.Z.T @ q + self._ZtHyp), self.d[Wl]])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularKkt("working-set KKT matrix is singular") from exc
        y = self.y_p + self.Z @ sol[:r]
        lam = sol[r:]
        if self.m_eq:
            g = self.H @ y + q + self.A_in[Wl].T @ lam
            nu = -scipy.linalg.solve_triangular(self.R, self.Y.T @ g, lower=False)
        else:
            nu = np.zeros(0)
        mu = np.zeros(self.m_in)
        mu[np.array(Wl, dtype=int)] = lam
        return y, nu, mu, lam

    def _acceptable(self, y, lam):
        if lam.size and lam.min() < -self.tol:
            return False
        if self.m_in and np.max(self.A_in @ y - self.b_in) > self.tol:
            return False
        return True

    def solve(self, q, warm_start=None):
        """Solve for linear term ``q``; ``warm_start`` is a QpSolution or a working set."""
        q = np.asarray(q, dtype=float).reshape(self.n)
        W0 = None
        if warm_start is not None:
            W0 = tuple(warm_start.working_set) if isinstance(warm_start, QpSolution) else tuple(warm_start)
            W0 = tuple(sorted(j for j in W0 if 0 <= j < self.m_in))
            try:
                y, nu, mu, lam = self._evaluate(W0, q)
            except SingularKkt:
                W0 = None
            else:
                if self._acceptable(y, lam):
                    return QpSolution(y, nu, mu, W0, 0, self, q)
        W, iters = self._active_set(q, W0)
        y, nu, mu, lam = self._evaluate(W, q)
        return QpSolution(y, nu, mu, W, iters, self, q)

    # primal active-set iterations in reduced coordinates
    def _eqp(self, g, W):
        """Step ``p`` minimising ``p'Hr p/2 + g'p`` with ``C_W p = 0`` and its multipliers."""
        r = self.r
        if not W:
            return -scipy.linalg.cho_solve(self.Lr, g) if r else np.zeros(0), np.zeros(0)
        CW = self.C[list(W)]
        k = len(W)
        K = np.zeros((r + k, r + k))
        K[:r, :r] = self.Hr
        K[:r, r:] = CW.T
        K[r:, :r] = CW
        rhs = np.concatenate([-g, np.zeros(k)])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularKkt("working-set KKT matrix is singular") from exc
        return sol[:r], sol[r:]

    def _eq_point(self, qr, W):
        """Minimiser of the reduced objective with the working set held as equalities."""
        r, k = self.r, len(W)
        CW = self.C[list(W)]
        K = np.zeros((r + k, r + k))
        K[:r, :r] = self.Hr
        K[:r, r:] = CW.T
        K[r:, :r] = CW
        sol = np.linalg.solve(K, np.concatenate([-qr, self.d[list(W)]]))
        return sol[:r]

    def _feasible(self, v):
        return self.m_in == 0 or np.max(self.C @ v - self.d) <= self.tol

    def _independent(self, W, j):
        if not W:
            return np.linalg.norm(self.C[j]) > 1e-12
        M = self.C[list(W) + [j]]
        s = np.linalg.svd(M, compute_uv=False)
        return s[-1] > 1e-10 * max(1.0, s[0]) and len(W) < self.r

    def _start(self, qr, W0):
        if W0:
            try:
                v = self._eq_point(qr, W0)
            except np.linalg.LinAlgError:
                v = None
            if v is not None and self._feasible(v):
                return v, list(W0)
        v = -scipy.linalg.cho_solve(self.Lr, qr) if self.r else np.zeros(0)
        if self._feasible(v):
            return v, []
        # greedy: add the most violated constraint (lowest index on ties)
        W = []
        for _ in range(min(self.m_in, self.r)):
            viol = self.C @ v - self.d
            viol[W] = -np.inf
            j = int(np.argmax(viol))
            if viol[j] <= self.tol:
                break
            if not self._independent(W, j):
                break
            W.append(j)
            v = self._eq_point(qr, W)
            if self._feasible(v):
                return v, sorted(W)
        # phase one by linear programming
        res = linprog(np.zeros(self.r), A_ub=self.C, b_ub=self.d, bounds=[(None, None)] * self.r,
                      method="highs")
        if res.status == 2:
            raise Infeasible("inequality constraints admit no feasible point")
        if res.status != 0:
            raise Infeasible(f"phase-one linear program failed: {res.message}")
        v = res.x
        slack = self.C @ v - self.d
        W = []
        for j in np.flatnonzero(slack >= -self.tol):
            if self._independent(W, int(j)):
                W.append(int(j))
        return v, W

    def _active_set(self, q, W0):
        qr = self.Z.T @ q + self._ZtHyp
        v, W = self._start(qr, W0)
        W = list(W)
        for it in range(1, self.max_iter + 1):
            g = self.Hr @ v + qr if self.r else np.zeros(0)
            p, lam = self._eqp(g, W)
            if np.max(np.abs(p), initial=0.0) <= 1e-12 * (1.0 + np.max(np.abs(v), initial=0.0)):
                if lam.size == 0 or lam.min() >= -self.tol:
                    return tuple(sorted(W)), it
                W.pop(int(np.argmin(lam)))
                continue
            alpha, block = 1.0, None
            if self.m_in:
                Cp = self.C @ p
                cand = Cp > 1e-14
                if W:
                    cand[W] = False
                if cand.any():
                    idx = np.flatnonzero(cand)
                    steps = np.maximum((self.d[idx] - self.C[idx] @ v) / Cp[idx], 0.0)
                    k = int(np.argmin(steps))
                    if steps[k] < 1.0:
                        alpha, block = float(steps[k]), int(idx[k])
            v = v + alpha * p
            if block is not None:
                W.append(block)
        raise MaxIterations(f"active-set method exceeded {self.max_iter} iterations")


def solve(qp, warm_start=None, tol=1e-8, max_iter=None):
    """Solve a :class:`DenseQp`; see :class:`QpWorkspace`."""
    ws = QpWorkspace(qp.H, qp.A_eq, qp.b_eq, qp.A_in, qp.b_in, tol=tol, max_iter=max_iter)
    return ws.solve(qp.q, warm_start)


def solve_equality_kkt(H, q, A_eq, b_eq):
    """Solve ``[[H, A'], [A, 0]] (y, nu) = (-q, b)`` directly."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = H.shape[0]
    A = np.asarray(A_eq, dtype=float).reshape(-1, n)
    m = A.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([-np.asarray(q, dtype=float).reshape(n), np.asarray(b_eq, dtype=float).reshape(m)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(K, check_finite=True)
    d = np.abs(np.diag(lu))
    if d.min() <= 1e-14 * max(1.0, d.max()):
        raise SingularKkt("KKT matrix is singular")
    sol = scipy.linalg.lu_solve((lu, piv), rhs)
    return sol[:n], sol[n:]

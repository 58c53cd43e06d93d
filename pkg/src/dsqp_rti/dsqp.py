"""Bi-level dSQP: SQP linearisations solved inexactly by a fixed number of ADMM iterations.

Also contains a centralized full-step SQP (``solve_to_kkt``) used to obtain
reference solutions and to initialise the first NMPC step, and a regularity
diagnostic for KKT points.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .admm import AdmmSubproblem, admm_run
from .errors import Diverged, MaxIterations, NotStrictlyConvex
from .nlp import PrimalDualPoint, kkt_residual
from .qp import ACTIVATION_TOL, QpWorkspace

__all__ = [
    "DsqpResult",
    "DsqpSettings",
    "QpLinearization",
    "RegularityReport",
    "build_qp",
    "check_regularity",
    "dsqp_run",
    "solve_to_kkt",
]

HESSIAN_MODES = ("exact", "gauss_newton", "auto")


@dataclass
class DsqpSettings:
    k_max: int = 1
    l_max: int = 1
    rho: float = 1.0
    hessian_mode: str = "auto"
    qp_tol: float = 1e-8
    eps_reg: float = 1e-8
    auto_test: str = "full"

    def __post_init__(self):
        if self.k_max < 1 or self.l_max < 1:
            raise ValueError("k_max and l_max must be >= 1")
        if not self.rho > 0 or not self.qp_tol > 0 or not self.eps_reg > 0:
            raise ValueError("rho, qp_tol and eps_reg must be positive")
        if self.hessian_mode not in HESSIAN_MODES:
            raise ValueError(f"hessian_mode must be one of {HESSIAN_MODES}")
        if self.auto_test not in ("full", "reduced"):
            raise ValueError("auto_test must be 'full' or 'reduced'")


@dataclass
class QpLinearization:
    """Per-subsystem QP data at the linearisation point ``z``."""

    lins: list
    z: np.ndarray

    @property
    def hessian_modes(self):
        return [lin.hessian_mode for lin in self.lins]


def build_qp(nlp, p, mode="auto", auto_test="full"):
    """Evaluate derivatives of every subsystem at ``p`` (Step 3 of dSQP)."""
    if mode not in HESSIAN_MODES:
        raise ValueError(f"unknown Hessian mode {mode!r}")
    lins = [
        s.linearize(zi, nui, mui, mode, auto_test)
        for s, (zi, nui, mui) in zip(nlp.subsystems, p.split(nlp))
    ]
    return QpLinearization(lins, p.z.copy())


@dataclass
class DsqpResult:
    point: PrimalDualPoint
    working_sets: list
    history: list = field(default_factory=list)
    hessian_modes: list = field(default_factory=list)


def dsqp_run(nlp, p0, settings, gamma0=None, p_ref=None, mode="centralized", bus=None,
             agents=None, warm=None, trace=None, admm_callback=None):
    """Run exactly ``k_max`` dSQP iterations with ``l_max`` ADMM iterations each.

    Parameters
    ----------
    nlp : PartitionedNlp
    p0 : PrimalDualPoint
        Initial primal-dual point. When ``gamma0`` is omitted the ADMM duals
        start at ``E' p0.lam``; otherwise ``gamma0`` is used (warm start).
    p_ref : PrimalDualPoint, optional
        Reference solution; ``history`` then records ``|p^k - p_ref|``.
    mode : {'centralized', 'decentralized'}
        Averaging implementation used inside ADMM.
    trace : list, optional
        Receives one dict per ADMM iteration (k, l, consensus and KKT
        residuals, distance to ``p_ref``). Recovering the local multipliers
        costs an extra round of local solves, so this is meant for logs.

    Returns
    -------
    DsqpResult
        ``point`` holds ``(z, nu, mu, lam)`` with ``lam`` recovered from
        ``gamma`` and the final ``gamma`` itself.
    """
    p = p0.copy()
    gamma = nlp.E.T @ p.lam if gamma0 is None else np.array(gamma0, dtype=float)
    history = []
    if p_ref is not None:
        history.append(p.distance(p_ref))
    warm_sets = warm
    modes = []
    for k in range(settings.k_max):
        qpl = build_qp(nlp, p, settings.hessian_mode, settings.auto_test)
        modes.append(qpl.hessian_modes)
        sub = AdmmSubproblem(nlp, qpl.lins, nlp.split(qpl.z), settings.rho,
                             tol=settings.qp_tol, eps_reg=settings.eps_reg)
        cb = admm_callback
        if trace is not None:
            cb = _trace_callback(trace, k, nlp, sub, p_ref, admm_callback, p.z, gamma)
        state = admm_run(sub, p.z, gamma, settings.l_max, mode=mode, bus=bus, agents=agents,
                         warm=warm_sets, callback=cb)
        warm_sets = state.working_sets
        gamma = state.gamma
        lam = nlp.lambda_from_gamma(gamma)
        p = PrimalDualPoint(state.z, state.nu, state.mu, lam, gamma)
        if not (np.all(np.isfinite(p.z)) and np.all(np.isfinite(gamma))):
            raise Diverged(f"non-finite iterate in SQP iteration {k}")
        if p_ref is not None:
            history.append(p.distance(p_ref))
    return DsqpResult(p, warm_sets, history, modes)


def _trace_callback(trace, k, nlp, sub, p_ref, inner, z0, gamma0):
    prev = {"z": z0, "gamma": gamma0, "sols": [None] * sub.S}

    def cb(l, y, z, gamma):
        lam = nlp.lambda_from_gamma(gamma)
        # the local multipliers belong to the inputs of this iteration, so re-solve there
        sols = [sub.local_solve(i, prev["z"][s], prev["gamma"][s], prev["sols"][i])
                for i, s in enumerate(nlp.z_slices)]
        nu = np.concatenate([s.nu for s in sols] + [np.zeros(0)])
        mu = np.concatenate([s.mu for s in sols] + [np.zeros(0)])
        prev.update(z=z, gamma=gamma, sols=sols)
        row = {
            "k": k,
            "l": l,
            "consensus_residual": float(np.linalg.norm(nlp.E @ z - nlp.c)),
            "kkt_residual": float(kkt_residual(nlp, PrimalDualPoint(z, nu, mu, lam))),
            "distance_to_reference": None,
        }
        if p_ref is not None:
            row["distance_to_reference"] = float(PrimalDualPoint(z, nu, mu, lam).distance(p_ref))
        trace.append(row)
        if inner is not None:
            inner(l, y, z, gamma)

    return cb


def write_trace(trace, path, extra=()):
    """Write a dSQP trace (list of dicts) as CSV; ``extra`` columns come first."""
    cols = list(extra) + ["k", "l", "consensus_residual", "kkt_residual", "distance_to_reference"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in trace:
            w.writerow({c: ("" if row.get(c) is None else row[c]) for c in cols})


def _stacked_qp(nlp, qpl):
    H = scipy.linalg.block_diag(*[lin.hessian for lin in qpl.lins])
    grad = np.concatenate([lin.grad for lin in qpl.lins])
    Jg = scipy.linalg.block_diag(*[lin.jac_g for lin in qpl.lins])
    Jh = scipy.linalg.block_diag(*[lin.jac_h for lin in qpl.lins])
    g = np.concatenate([lin.g for lin in qpl.lins] + [np.zeros(0)])
    h = np.concatenate([lin.h for lin in qpl.lins] + [np.zeros(0)])
    z = qpl.z
    E = nlp.E.toarray()
    A_eq = np.vstack([Jg.reshape(-1, nlp.n), E])
    b_eq = np.concatenate([Jg.reshape(-1, nlp.n) @ z - g, nlp.c])
    A_in = Jh.reshape(-1, nlp.n)
    b_in = A_in @ z - h
    q = grad - H @ z
    return H, q, A_eq, b_eq, A_in, b_in


def solve_qp_centralized(nlp, qpl, tol=1e-8, warm=None):
    """Solve the stacked SQP subproblem exactly; returns (point, working set)."""
    H, q, A_eq, b_eq, A_in, b_in = _stacked_qp(nlp, qpl)
    ws = QpWorkspace(H, A_eq, b_eq, A_in, b_in, tol=tol, cache_maps=False)
    sol = ws.solve(q, warm)
    n_g = nlp.n_g
    p = PrimalDualPoint(sol.y, sol.nu[:n_g], sol.mu, sol.nu[n_g:])
    return p, sol.working_set


def solve_to_kkt(nlp, p0, tol=1e-8, max_outer=50, hessian_mode="auto", auto_test="reduced",
                 qp_tol=1e-10, warm=None):
    """Centralized full-step SQP until ``kkt_residual <= tol``.

    Each iteration solves the stacked QP exactly and jumps to its primal-dual
    solution. With ``hessian_mode='exact'`` a step whose QP is not strictly
    convex or that does not reduce the KKT residual is replaced by the
    Gauss-Newton step; the other modes fall back to Gauss-Newton only on a
    nonconvex QP. Raises ``MaxIterations`` (with the last iterate in
    ``best``) when the budget is exhausted.
    """
    p = p0.copy()
    p.gamma = None
    W = warm
    res = kkt_residual(nlp, p)
    for _ in range(max_outer):
        if res <= tol:
            return p
        p_new = None
        try:
            p_new, W_new = solve_qp_centralized(nlp, build_qp(nlp, p, hessian_mode, auto_test), qp_tol, W)
            res_new = kkt_residual(nlp, p_new)
            if hessian_mode == "exact" and not res_new < res:
                p_new = None
        except NotStrictlyConvex:
            pass
        if p_new is None:
            p_new, W_new = solve_qp_centralized(nlp, build_qp(nlp, p, "gauss_newton"), qp_tol, W)
            res_new = kkt_residual(nlp, p_new)
        if not np.all(np.isfinite(p_new.vector())):
            raise Diverged("non-finite SQP iterate")
        p, W, res = p_new, W_new, res_new
    if res <= tol:
        return p
    raise MaxIterations(f"KKT residual {res:.3e} after {max_outer} SQP iterations", best=p)


@dataclass
class RegularityReport:
    strict_complementarity_margin: float
    licq_sigma_min: float
    reduced_hessian_min_eig: list
    active: list

    @property
    def ok(self):
        return (self.strict_complementarity_margin > 0 and self.licq_sigma_min > 0
                and min(self.reduced_hessian_min_eig, default=1.0) > 0)


def check_regularity(nlp, p, activation_tol=ACTIVATION_TOL):
    """Strict complementarity, LICQ and second-order diagnostics at ``p``.

    (i) ``min_j |h_j| + |mu_j|``; (ii) smallest singular value of the stacked
    matrix of equality Jacobians, active inequality Jacobians and ``E``;
    (iii) per subsystem, the smallest eigenvalue of the Lagrangian Hessian
    on the null space of its equality Jacobian.
    """
    h = nlp.h(p.z)
    margin = float(np.min(np.abs(h) + np.abs(p.mu))) if h.size else np.inf
    active = np.flatnonzero(h >= -activation_tol)
    rows, eigs = [], []
    for i, (s, (zi, nui, mui)) in enumerate(zip(nlp.subsystems, p.split(nlp))):
        off = nlp.z_offsets[i]
        jg = s.jac_g(zi)
        jh = s.jac_h(zi)
        hi = h[nlp.h_slices[i]]
        ja = jh[hi >= -activation_tol]
        for blk in (jg, ja):
            if blk.shape[0]:
                M = sp.lil_matrix((blk.shape[0], nlp.n))
                M[:, off:off + s.n] = blk
                rows.append(M.tocsr())
        H = s.hess_lagrangian(zi, nui, mui)
        Z = scipy.linalg.null_space(jg) if jg.shape[0] else np.eye(s.n)
        eigs.append(float(np.linalg.eigvalsh(Z.T @ H @ Z)[0]) if Z.shape[1] else np.inf)
    if nlp.n_c:
        rows.append(nlp.E)
    A = sp.vstack(rows).toarray() if rows else np.zeros((0, nlp.n))
    sig = float(np.linalg.svd(A, compute_uv=False)[-1]) if A.shape[0] and A.shape[0] <= A.shape[1] else 0.0
    return RegularityReport(margin, sig, eigs, active.tolist())

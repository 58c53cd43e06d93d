"""Certificate quantities for dSQP with a fixed number of ADMM iterations.

Inner level: Lipschitz constant ``d2`` of the local QP step, the ADMM
iteration matrix ``A`` on ``w = (z, gamma/rho)`` inside the region of constant
active set, and the sufficient number of ADMM iterations
``l_max >= 1 + max(0, ceil(log_{a_w}(a / (c1 c2))))``.

Outer level: the chain of real-time-iteration constants that ends in the
sufficient sampling interval and optimizer initialisation radius.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .admm import AdmmSubproblem, AveragingOperator
from .dsqp import build_qp
from .errors import InconclusiveCertificate, InvalidInputs, SingularKkt
from .nlp import PrimalDualPoint
from .qp import ACTIVATION_TOL

__all__ = [
    "Certificate",
    "Contraction",
    "QpCertificateInputs",
    "RtiConstants",
    "accuracy_for_lmax",
    "c1_constant",
    "certify_qp",
    "compute_contraction",
    "compute_d2",
    "d1_constant",
    "d_matrix",
    "estimate_rti_constants",
    "lmax_bound",
    "rti_constants",
    "sample_ball",
]


def _singular_values(E):
    Ed = E.toarray() if sp.issparse(E) else np.atleast_2d(np.asarray(E, dtype=float))
    if Ed.size == 0:
        return np.zeros(0)
    return np.linalg.svd(Ed, compute_uv=False)


def c1_constant(E, rho):
    """``max(1, |E'| / rho)``."""
    s = _singular_values(E)
    return max(1.0, (s[0] if s.size else 0.0) / rho)


def d1_constant(E, rho):
    """Spectral norm of ``[M_avg; rho (EE')^{-1} E] [I I]``.

    On ``null(E)`` the stacked map is the identity, on ``range(E')`` it scales
    by ``rho / sigma``; hence ``sqrt(2) max(1, rho / sigma_min(E))``.
    """
    s = _singular_values(E)
    if s.size == 0:
        return math.sqrt(2.0)
    return math.sqrt(2.0) * max(1.0, rho / s[-1])


@dataclass
class QpCertificateInputs:
    """Local QP data entering the certificate matrices.

    ``H`` are the Hessians actually used by the local solves (without the
    ``rho I`` term), ``Jg`` the equality Jacobians and ``JhA`` the rows of the
    active inequality Jacobians, all per subsystem.
    """

    H: list
    Jg: list
    JhA: list
    E: object
    rho: float
    nlp: object = None

    @classmethod
    def from_subproblem(cls, sub, active_sets):
        JhA = [lin.jac_h[list(W)] for lin, W in zip(sub.lins, active_sets)]
        return cls([np.asarray(H) for H in sub.hessians], [lin.jac_g for lin in sub.lins], JhA,
                   sub.nlp.E, sub.rho, sub.nlp)

    @property
    def n_blocks(self):
        return [H.shape[0] for H in self.H]

    def kkt_matrix(self, i):
        H, Jg, JhA = self.H[i], self.Jg[i], self.JhA[i]
        n = H.shape[0]
        C = np.vstack([Jg.reshape(-1, n), JhA.reshape(-1, n)])
        m = C.shape[0]
        return np.block([[H + self.rho * np.eye(n), C.T], [C, np.zeros((m, m))]])

    def kkt_inverses(self):
        out = []
        for i in range(len(self.H)):
            K = self.kkt_matrix(i)
            try:
                lu = scipy.linalg.lu_factor(K, check_finite=True)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise SingularKkt(f"local KKT matrix {i} is singular") from exc
            d = np.abs(np.diag(lu[0]))
            if d.min() <= 1e-13 * max(1.0, d.max()):
                raise SingularKkt(f"local KKT matrix {i} is singular")
            out.append(scipy.linalg.lu_solve(lu, np.eye(K.shape[0])))
        return out


def d_matrix(inputs, kinv=None):
    """Dense ``rho K^{-1} [[I, -I], [0, 0], [0, 0]]`` with rows ordered (y, nu, mu_A) per subsystem.

    Only meant for small problems and tests; the norm is computed blockwise in
    :func:`compute_d2`.
    """
    kinv = inputs.kkt_inverses() if kinv is None else kinv
    ns = inputs.n_blocks
    n = sum(ns)
    rows, off = [], 0
    for Ki, ni in zip(kinv, ns):
        blk = inputs.rho * Ki[:, :ni]
        R = np.zeros((Ki.shape[0], 2 * n))
        R[:, off:off + ni] = blk
        R[:, n + off:n + off + ni] = -blk
        rows.append(R)
        off += ni
    return np.vstack(rows)


def _d_norm(inputs, kinv):
    # [I, -I] is sqrt(2) times a co-isometry, and K^{-1} is block diagonal
    return math.sqrt(2.0) * inputs.rho * max(
        np.linalg.norm(Ki[:, :ni], 2) for Ki, ni in zip(kinv, inputs.n_blocks)
    )


def compute_d2(samples):
    """Per-sample ``|D|`` and their maximum ``d2``.

    Parameters
    ----------
    samples : list of QpCertificateInputs

    Returns
    -------
    norms : list of float
    d2 : float
    rejected : list of int
        Indices of samples whose local KKT matrix was singular.
    """
    norms, rejected = [], []
    for s, inp in enumerate(samples):
        try:
            norms.append(_d_norm(inp, inp.kkt_inverses()))
        except SingularKkt:
            rejected.append(s)
    if not norms:
        raise SingularKkt("every sample had a singular local KKT matrix")
    return norms, max(norms), rejected


@dataclass
class Contraction:
    """ADMM iteration matrix on ``w = (z, gamma/rho)`` for a constant active set.

    ``A = [M; I - M] [T, I - T]`` with ``T = rho [K^{-1}]_yy`` block diagonal.
    Since ``[M; I - M]`` is an isometry, ``|A| = |[T, I - T]|``; its nonzero
    eigenvalues are those of ``T M + (I - T)(I - M)``.
    """

    T_blocks: list
    norm: float
    spectral_radius: float
    op: AveragingOperator = field(repr=False, default=None)

    @property
    def T(self):
        return scipy.linalg.block_diag(*self.T_blocks)

    def _M(self, v):
        if self.op is None or self.op.n_c == 0:
            return v
        return v - self.op.E.T @ self.op.nlp.eet_solve(self.op.E @ v)

    def apply(self, dw):
        """``A dw`` without forming ``A``."""
        n = dw.size // 2
        dz, dg = dw[:n], dw[n:]
        r = dz - dg
        out, off = np.empty(n), 0
        for Tb in self.T_blocks:
            k = Tb.shape[0]
            out[off:off + k] = Tb @ r[off:off + k]
            off += k
        v = out + dg
        z = self._M(v)
        return np.concatenate([z, v - z])

    def matrix(self):
        """Dense ``A`` (2n x 2n)."""
        T = self.T
        n = T.shape[0]
        M = self.op.matrix() if self.op is not None else np.eye(n)
        I = np.eye(n)
        return np.block([[M @ T, M @ (I - T)], [(I - M) @ T, (I - M) @ (I - T)]])


def _iteration_norm(T_blocks):
    # |[T, I - T]|^2 = max eig of T T' + (I - T)(I - T)', blockwise
    worst = 0.0
    for Tb in T_blocks:
        I = np.eye(Tb.shape[0])
        G = Tb @ Tb.T + (I - Tb) @ (I - Tb).T
        worst = max(worst, float(np.linalg.eigvalsh(0.5 * (G + G.T))[-1]))
    return math.sqrt(worst)


def _spectral_radius(T_blocks, Q):
    # T = U L U' and I - M = Q Q'; TM + (I - T)(I - M) = X Y' with X = [U L, Q] and
    # Y' = [U'(I - 2QQ'); Q'], so its nonzero eigenvalues are those of Y'X
    Us, Ls = [], []
    for Tb in T_blocks:
        w, V = np.linalg.eigh(Tb)
        keep = np.abs(w) > 1e-13
        Us.append(V[:, keep])
        Ls.append(w[keep])
    U = scipy.linalg.block_diag(*Us) if Us else np.zeros((0, 0))
    L = np.concatenate(Ls) if Ls else np.zeros(0)
    G = U.T @ Q
    r, m = G.shape
    S = np.block([[(np.eye(r) - 2 * G @ G.T) * L, -G], [G.T * L, np.eye(m)]])
    return float(np.max(np.abs(np.linalg.eigvals(S)))) if S.size else 0.0


def compute_contraction(inputs, op=None, kinv=None, radius=True):
    """``T``, ``|A|`` and the spectral radius of ``A`` for one sample."""
    kinv = inputs.kkt_inverses() if kinv is None else kinv
    Ts = []
    for Ki, ni in zip(kinv, inputs.n_blocks):
        Tb = inputs.rho * Ki[:ni, :ni]
        Ts.append(0.5 * (Tb + Tb.T))
    if op is None and inputs.nlp is not None:
        op = AveragingOperator(inputs.nlp)
    norm = _iteration_norm(Ts)
    sr = float("nan")
    if radius:
        n = sum(Tb.shape[0] for Tb in Ts)
        sr = _spectral_radius(Ts, op.range_basis() if op is not None else np.zeros((n, 0)))
    return Contraction(Ts, norm, sr, op)


def lmax_bound(a, a_w, c1, c2):
    """Sufficient number of ADMM iterations for relative QP accuracy ``a``."""
    if not 0 < a < 1:
        raise InvalidInputs("a must lie in (0, 1)")
    if not 0 < a_w < 1:
        raise InvalidInputs("contraction factor a_w must lie in (0, 1); certificate inconclusive")
    if c1 < 1 or c2 <= 0:
        raise InvalidInputs("need c1 >= 1 and c2 > 0")
    x = math.log(a / (c1 * c2)) / math.log(a_w)
    return 1 + max(0, math.ceil(x))


def accuracy_for_lmax(l_max, a_w, c1, c2):
    """An accuracy ``a`` for which :func:`lmax_bound` returns exactly ``l_max``.

    ``lmax_bound`` returns ``l_max`` for ``a`` in
    ``(c1 c2 a_w^(l_max - 1), c1 c2 a_w^(l_max - 2)]``; the geometric midpoint
    ``c1 c2 a_w^(l_max - 1.5)`` is returned so that rounding cannot move the
    result to a neighbouring integer.
    """
    if l_max < 2:
        raise InvalidInputs("l_max must be at least 2 to back-solve an accuracy")
    if not 0 < a_w < 1:
        raise InvalidInputs("a_w must lie in (0, 1)")
    a = c1 * c2 * a_w ** (l_max - 1.5)
    if not 0 < a < 1:
        raise InvalidInputs(f"back-solved accuracy {a:.3g} is not in (0, 1)")
    return a


def sample_ball(center, eps, n_samples, rng):
    """Uniform samples in a ball of radius ``eps`` scaled per component by ``1 + |center|``."""
    center = np.asarray(center, dtype=float)
    d = center.size
    out = []
    for _ in range(n_samples):
        v = rng.standard_normal(d)
        v *= eps * rng.uniform() ** (1.0 / d) / np.linalg.norm(v)
        out.append(center + v * (1.0 + np.abs(center)))
    return out


@dataclass
class Certificate:
    """Inner-iteration certificate. ``a_w`` is the sampled spectral radius of ``A``.

    ``norm_A`` is the largest sampled spectral norm; with equality constraints
    it equals one, so it certifies nothing by itself and ``norm_conclusive``
    records that.
    """

    d1: float
    d2: float
    c1: float
    c2: float
    a_w: float
    norm_A: float
    a: float
    l_max_bound: int
    epsilon: float
    n_samples: int
    seed: int
    rho: float
    conclusive: bool
    norm_conclusive: bool
    rejected: list = field(default_factory=list)
    per_sample: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _point_from_vector(nlp, v, gamma=None):
    n, ng, nh = nlp.n, nlp.n_g, nlp.n_h
    return PrimalDualPoint(v[:n], v[n:n + ng], v[n + ng:n + ng + nh], v[n + ng + nh:], gamma)


def certificate_inputs(nlp, p, rho=1.0, hessian_mode="exact", active=None, eps_reg=1e-8):
    """Local QP data at ``p``; ``active`` defaults to ``h(z) >= -ACTIVATION_TOL``."""
    qpl = build_qp(nlp, p, hessian_mode)
    sub = AdmmSubproblem(nlp, qpl.lins, nlp.split(qpl.z), rho, eps_reg=eps_reg)
    if active is None:
        h = nlp.h(p.z)
        active = [tuple(np.flatnonzero(h[s] >= -ACTIVATION_TOL).tolist()) for s in nlp.h_slices]
    return QpCertificateInputs.from_subproblem(sub, active), sub


def certify_qp(nlp, p_star, rho=1.0, a=0.5, n_samples=64, eps=1e-2, seed=0, hessian_mode="exact"):
    """Sample ``B(p*, eps)`` and compute ``d2``, ``a_w``, ``c1``, ``c2`` and the ``l_max`` bound.

    The active set is the one of ``p*`` throughout the ball.
    """
    rng = np.random.default_rng(seed)
    h = nlp.h(p_star.z)
    active = [tuple(np.flatnonzero(h[s] >= -ACTIVATION_TOL).tolist()) for s in nlp.h_slices]
    op = AveragingOperator(nlp)
    c1 = c1_constant(nlp.E, rho)
    d1 = d1_constant(nlp.E, rho)
    d_norms, radii, norms, rejected, per = [], [], [], [], []
    for s, v in enumerate(sample_ball(p_star.vector(), eps, n_samples, rng)):
        p = _point_from_vector(nlp, v)
        inp, _ = certificate_inputs(nlp, p, rho, hessian_mode, active)
        try:
            kinv = inp.kkt_inverses()
        except SingularKkt:
            rejected.append(s)
            continue
        dn = _d_norm(inp, kinv)
        con = compute_contraction(inp, op, kinv)
        d_norms.append(dn)
        radii.append(con.spectral_radius)
        norms.append(con.norm)
        per.append({"sample": s, "d_norm": dn, "norm_A": con.norm, "spectral_radius": con.spectral_radius})
    if not d_norms:
        raise SingularKkt("every sample had a singular local KKT matrix")
    d2 = max(d_norms)
    c2 = d1 + d1 * d2 + d2
    a_w = max(radii)
    norm_A = max(norms)
    conclusive = a_w < 1.0
    l_max = lmax_bound(a, a_w, c1, c2) if conclusive else None
    return Certificate(d1, d2, c1, c2, a_w, norm_A, a, l_max, eps, n_samples, seed, rho,
                       conclusive, norm_A < 1.0, rejected, per)


@dataclass
class RtiConstants:
    """Real-time-iteration constants from the estimated inputs to ``delta_bar`` and ``r_p_tilde``."""

    a1: float
    a2: float
    a3: float
    L_Vx: float
    L_px: float
    L_fx_c: float
    L_fu_c: float
    V_bar: float
    r_p: float
    r_x: float
    delta1: float
    delta: float
    a_p: float
    L_fx_d: float = None
    L_fu_d: float = None
    eta: float = None
    r_V: float = None
    delta3: float = None
    kappa: float = None
    L_V: float = None
    a_bar: float = None
    L_e: float = None
    L_Vp: float = None
    beta_prime: float = None
    r_p_tilde: float = None
    delta4p: float = None
    delta5: float = None
    delta_bar: float = None

    def to_dict(self):
        return asdict(self)


def rti_constants(a1, a2, a3, L_Vx, L_px, L_fx_c, L_fu_c, V_bar, r_p, r_x, delta1, delta, a_p):
    """Evaluate the deterministic constant chain.

    Raises
    ------
    InconclusiveCertificate
        Naming the first constant that is not finite and positive (or
        ``kappa`` when it is not below one).
    """
    c = RtiConstants(a1, a2, a3, L_Vx, L_px, L_fx_c, L_fu_c, V_bar, r_p, r_x, delta1, delta, a_p)
    for name in ("a1", "a2", "a3", "L_Vx", "L_px", "L_fx_c", "L_fu_c", "V_bar", "r_p", "r_x",
                 "delta1", "delta", "a_p"):
        _positive(name, getattr(c, name))
    grow = math.exp(L_fx_c * delta1)
    c.L_fx_d = grow * L_fx_c
    c.L_fu_d = grow * L_fu_c
    c.eta = c.L_fx_d + c.L_fu_d * L_px
    c.r_V = math.sqrt(V_bar / a1)
    c.delta3 = min(
        delta,
        delta1,
        r_x / (c.eta * c.r_V + c.L_fu_d * r_p),
        r_p * (1 - a_p) / (L_px * a_p * (c.L_fu_d * r_p + c.eta * c.r_V)),
    )
    c.kappa = a_p * (1 + c.delta3 * L_px * c.L_fu_d)
    if not c.kappa < 1:
        raise InconclusiveCertificate(f"kappa = {c.kappa:.6g} is not below one", constant="kappa")
    c.L_V = 2 * math.sqrt(V_bar) * L_Vx
    c.a_bar = a3 / a2
    c.L_e = c.L_V * c.L_fu_d
    c.L_Vp = L_fu_c * grow * L_Vx
    c.beta_prime = c.a_bar * math.sqrt(a1) / (4 * L_px * a_p * c.eta)
    c.r_p_tilde = min(r_p, c.a_bar * V_bar / c.L_e)
    c.delta4p = (1 - c.kappa) * c.r_p_tilde * math.sqrt(a1) / (math.sqrt(V_bar) * L_px * a_p * c.eta)
    c.delta5 = c.beta_prime * (1 - c.kappa) / c.L_Vp
    c.delta_bar = min(c.delta3, c.delta4p, c.delta5)
    for name in ("eta", "r_V", "delta3", "L_V", "a_bar", "L_e", "L_Vp", "beta_prime", "r_p_tilde",
                 "delta4p", "delta5", "delta_bar"):
        _positive(name, getattr(c, name))
    return c


def _positive(name, v):
    if v is None or not math.isfinite(v) or v <= 0:
        raise InconclusiveCertificate(f"{name} = {v} is not finite and positive", constant=name)


@dataclass
class RtiEstimates:
    a1: float
    a2: float
    a3: float
    L_fx_c: float
    L_fu_c: float
    L_px: float
    L_Vx: float
    n_states: int
    n_quotients: int
    seed: int

    def to_dict(self):
        return asdict(self)


def estimate_rti_constants(value, feedback, step, field_c, kkt_point, states, delta, n_quotients=512,
                           radius=1e-3, seed=0):
    """Sampled estimates of the value-function envelope and Lipschitz constants.

    Parameters
    ----------
    value : callable
        ``x -> V(x)``, optimal value of the OCP at initial state ``x``.
    feedback : callable
        ``x -> u``, the ideal (fully converged) NMPC feedback.
    step : callable
        ``(x, u) -> x_next`` over one sampling interval ``delta``.
    field_c : callable
        ``(x, u) -> dx/dt`` of the continuous-time plant.
    kkt_point : callable
        ``x -> p`` (flat vector of the converged primal-dual solution).
    states : list of ndarray
        Sample states near the setpoint (nonzero).
    n_quotients : int
        Random difference quotients for the vector-field constants; the
        solution-map quotients use consecutive pairs of ``states``.
    radius : float
        Perturbation size for the vector-field quotients.

    Returns
    -------
    RtiEstimates
        ``a1 = min V/|x|^2``, ``a2 = max V/|x|^2``,
        ``a3 = min (V(x) - V(x+)) / (delta |x|^2)`` and the largest observed
        difference quotients.
    """
    rng = np.random.default_rng(seed)
    states = [np.asarray(x, dtype=float) for x in states]
    V = [value(x) for x in states]
    P = [np.asarray(kkt_point(x), dtype=float) for x in states]
    nx2 = [float(x @ x) for x in states]
    ratios = [v / s for v, s in zip(V, nx2)]
    U = [np.atleast_1d(np.asarray(feedback(x), dtype=float)) for x in states]
    dec = [(v - value(step(x, u))) / (delta * s) for x, u, v, s in zip(states, U, V, nx2)]
    Lfx = Lfu = 0.0
    for _ in range(n_quotients):
        j = rng.integers(len(states))
        x, u = states[j], U[j]
        dx = radius * rng.standard_normal(x.size)
        du = radius * rng.standard_normal(u.size)
        f0 = field_c(x, u)
        Lfx = max(Lfx, np.linalg.norm(field_c(x + dx, u) - f0) / np.linalg.norm(dx))
        Lfu = max(Lfu, np.linalg.norm(field_c(x, u + du) - f0) / np.linalg.norm(du))
    Lpx = LVx = 0.0
    for j in range(len(states)):
        for k in range(j + 1, len(states)):
            d = np.linalg.norm(states[j] - states[k])
            if d == 0:
                continue
            Lpx = max(Lpx, np.linalg.norm(P[j] - P[k]) / d)
            LVx = max(LVx, abs(math.sqrt(max(V[j], 0)) - math.sqrt(max(V[k], 0))) / d)
    return RtiEstimates(min(ratios), max(ratios), min(dec), Lfx, Lfu, Lpx, LVx, len(states),
                        n_quotients, seed)

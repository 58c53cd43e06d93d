"""Consensus ADMM on the SQP subproblem in two-block form.

Each iteration solves one small QP per subsystem, projects ``y + gamma/rho``
onto the consensus set (the averaging step) and updates the duals locally.
The averaging step is available in two implementations that must agree:

* ``averaging_centralized`` evaluates the closed-form projection with the
  factorised ``E E'``;
* ``averaging_decentralized`` runs two synchronous message rounds between
  neighbouring agents over an in-process :class:`MessageBus`.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CouplingError, DimensionMismatch, MissingMessage, NotStrictlyConvex
from .qp import QpWorkspace

__all__ = [
    "AdmmState",
    "AdmmSubproblem",
    "Agent",
    "AveragingOperator",
    "MessageBus",
    "admm_run",
    "averaging_centralized",
    "averaging_decentralized",
    "dual_update",
    "make_agents",
]


class AveragingOperator:
    """Projection onto ``{z : E z = c}`` and the matching multiplier map.

    ``M_avg = I - E'(EE')^{-1}E`` and offset ``E'(EE')^{-1}c``.
    """

    def __init__(self, nlp):
        self.nlp = nlp
        self.E = nlp.E
        self.c = nlp.c
        self.n, self.n_c = nlp.n, nlp.n_c
        if self.n_c:
            try:
                nlp.eet
            except RuntimeError as exc:
                from .errors import SingularEEt

                raise SingularEEt("E E' is singular") from exc

    def project(self, v):
        """Return ``(M_avg v + E'(EE')^{-1}c, (EE')^{-1}(E v - c))``."""
        if self.n_c == 0:
            return np.array(v, dtype=float), np.zeros(0)
        t = self.nlp.eet_solve(self.E @ v - self.c)
        return v - self.E.T @ t, t

    @property
    def offset(self):
        if self.n_c == 0:
            return np.zeros(self.n)
        return self.E.T @ self.nlp.eet_solve(self.c)

    def matrix(self):
        """Dense ``M_avg``."""
        if self.n_c == 0:
            return np.eye(self.n)
        Ed = self.E.toarray()
        return np.eye(self.n) - Ed.T @ np.linalg.solve(Ed @ Ed.T, Ed)

    def range_basis(self):
        """Orthonormal basis of ``range(E')`` (the complement of ``M_avg``), cached."""
        if getattr(self, "_range_basis", None) is None:
            if self.n_c == 0:
                self._range_basis = np.zeros((self.n, 0))
            else:
                self._range_basis = np.linalg.qr(self.E.T.toarray())[0]
        return self._range_basis

    def lambda_matrix(self, rho):
        """Dense ``(EE')^{-1} E rho``."""
        Ed = self.E.toarray()
        return rho * np.linalg.solve(Ed @ Ed.T, Ed) if self.n_c else np.zeros((0, self.n))


def averaging_centralized(y, gamma, op, rho):
    """Averaging step: ``z = M_avg(y + gamma/rho) + E'(EE')^{-1}c`` and the consensus multiplier."""
    v = np.asarray(y, dtype=float) + np.asarray(gamma, dtype=float) / rho
    z, t = op.project(v)
    return z, rho * t


def dual_update(y_next, z_next, gamma, rho):
    """``gamma + rho (y - z)``."""
    return gamma + rho * (y_next - z_next)


class MessageBus:
    """Synchronous in-process message passing with an optional transcript.

    Messages are delivered at the end of the round in which they are sent.
    ``drop`` is an optional predicate ``drop(round, src, dst) -> bool`` used
    to simulate lost messages.
    """

    def __init__(self, record=False, drop=None):
        self.record = record
        self.drop = drop
        self.round = 0
        self.transcript = []
        self.messages = 0
        self.bytes = 0
        self._inbox = {}
        self._pending = {}
        self.context = {}

    def send(self, src, dst, payload):
        payload = np.ascontiguousarray(payload, dtype=float)
        if self.drop is not None and self.drop(self.round, src, dst):
            return
        self._pending[(src, dst)] = payload
        self.messages += 1
        self.bytes += payload.nbytes
        if self.record:
            entry = {"round": self.round, "edge": [int(src), int(dst)],
                     "hash": hashlib.sha256(payload.tobytes()).hexdigest(), "size": int(payload.size)}
            entry.update(self.context)
            self.transcript.append(entry)

    def barrier(self):
        """Deliver everything sent in the current round and open the next one."""
        self._inbox = self._pending
        self._pending = {}
        self.round += 1

    def receive(self, src, dst):
        try:
            return self._inbox[(src, dst)]
        except KeyError:
            raise MissingMessage(f"agent {dst} got no message from {src} in round {self.round - 1}") from None

    def dump(self, path):
        with open(path, "w") as fh:
            for entry in self.transcript:
                fh.write(json.dumps(entry) + "\n")


class Agent:
    """Coupling view of one subsystem: which local entries are copies or shared originals."""

    def __init__(self, index, n):
        self.index = index
        self.n = n
        self.copy_of = {}     # in-neighbour j -> local copy indices
        self.shared_to = {}   # out-neighbour k -> local original indices, in k's copy order
        self.count = np.ones(n)

    def finalize(self):
        for idx in self.shared_to.values():
            np.add.at(self.count, idx, 1.0)


def make_agents(nlp):
    """Build agents from the consensus rows of ``nlp`` (each copy must appear in one row)."""
    S = nlp.S
    agents = [Agent(i, nlp.subsystems[i].n) for i in range(S)]
    E = nlp.E.tocsr()
    copy_rows = {}
    pairs = {}
    for r in range(nlp.n_c):
        cols = E.indices[E.indptr[r]:E.indptr[r + 1]]
        vals = E.data[E.indptr[r]:E.indptr[r + 1]]
        if len(cols) != 2 or sorted(vals.tolist()) != [-1.0, 1.0]:
            raise CouplingError(f"row {r} is not an original/copy pair")
        o = int(cols[vals > 0][0])
        c = int(cols[vals < 0][0])
        if c in copy_rows:
            raise CouplingError(f"copy variable {c} appears in more than one consensus row")
        copy_rows[c] = r
        io, ic = nlp.owner_of(o), nlp.owner_of(c)
        lo, lc = o - nlp.z_offsets[io], c - nlp.z_offsets[ic]
        pairs.setdefault((io, ic), []).append((lo, lc))
    for (io, ic), lst in sorted(pairs.items()):
        lo = np.array([a for a, _ in lst], dtype=int)
        lc = np.array([b for _, b in lst], dtype=int)
        agents[ic].copy_of[io] = lc
        agents[io].shared_to[ic] = lo
    for a in agents:
        a.finalize()
    return agents


def averaging_decentralized(agents, v_parts, bus):
    """Two-round neighbour averaging of ``v_i = y_i + gamma_i / rho``.

    Round 1: every copy holder sends its copy values to the owner of the
    original. Round 2: the owner averages its value with all received copies
    and sends the mean back. Returns the per-agent ``z_i``.
    """
    for a in agents:
        for j, idx in a.copy_of.items():
            bus.send(a.index, j, v_parts[a.index][idx])
    bus.barrier()
    z_parts = []
    for a in agents:
        acc = np.array(v_parts[a.index], dtype=float)
        for k, idx in a.shared_to.items():
            np.add.at(acc, idx, bus.receive(k, a.index))
        z = acc / a.count
        z_parts.append(z)
        for k, idx in a.shared_to.items():
            bus.send(a.index, k, z[idx])
    bus.barrier()
    for a in agents:
        for j, idx in a.copy_of.items():
            z_parts[a.index][idx] = bus.receive(j, a.index)
    return z_parts


class AdmmSubproblem:
    """Local QP data of every subsystem for one SQP iteration.

    Subsystem ``i`` solves

        min_y  (y - z^k)'H_i(y - z^k)/2 + grad_i'(y - z^k) + gamma_i'(y - z_i) + rho|y - z_i|^2/2
        s.t.   jac_g (y - z^k) + g = 0,   jac_h (y - z^k) + h <= 0.

    If ``H_i + rho I`` is not positive definite on the equality null space,
    its spectrum is shifted up to ``eps_reg``.
    """

    def __init__(self, nlp, lins, z_lin, rho, tol=1e-8, eps_reg=1e-8):
        if len(lins) != nlp.S:
            raise DimensionMismatch("one linearization per subsystem required")
        self.nlp, self.lins, self.rho, self.tol = nlp, lins, float(rho), tol
        self.z_lin = [np.asarray(z, dtype=float) for z in z_lin]
        self.workspaces, self.const, self.hessians = [], [], []
        self.regularized = []
        for lin, zk in zip(lins, self.z_lin):
            H = np.asarray(lin.hessian, dtype=float)
            n = H.shape[0]
            Ha = H + self.rho * np.eye(n)
            b_eq = lin.jac_g @ zk - lin.g
            b_in = lin.jac_h @ zk - lin.h
            try:
                ws = QpWorkspace(Ha, lin.jac_g, b_eq, lin.jac_h, b_in, tol=tol)
                shift = 0.0
            except NotStrictlyConvex:
                shift = eps_reg - np.linalg.eigvalsh(0.5 * (Ha + Ha.T))[0]
                Ha = Ha + shift * np.eye(n)
                ws = QpWorkspace(Ha, lin.jac_g, b_eq, lin.jac_h, b_in, tol=tol)
            self.regularized.append(shift)
            self.hessians.append(Ha - self.rho * np.eye(n))
            self.workspaces.append(ws)
            self.const.append(lin.grad - self.hessians[-1] @ zk)

    @property
    def S(self):
        return len(self.workspaces)

    def local_solve(self, i, z_i, gamma_i, warm=None):
        """Step 1 of an ADMM iteration for subsystem ``i``."""
        q = self.const[i] + gamma_i - self.rho * z_i
        return self.workspaces[i].solve(q, warm)

    @property
    def const_all(self):
        if not hasattr(self, "_const_all"):
            self._const_all = np.concatenate(self.const)
        return self._const_all

    def batched(self, working_sets):
        """Affine local-solve map of all subsystems for fixed working sets (cached)."""
        key = tuple(tuple(w) for w in working_sets)
        cache = self.__dict__.setdefault("_batched", {})
        if key not in cache:
            cache[key] = _BatchedLocalMap(self, key)
        return cache[key]


class _BatchedLocalMap:
    """All local solves as one batched matrix product per group of equal-shaped subsystems.

    Valid only while every working set stays optimal; :meth:`apply` reports
    whether that held.
    """

    def __init__(self, sub, working_sets):
        groups = {}
        for i, (ws, W) in enumerate(zip(sub.workspaces, working_sets)):
            G, s0, Wi = ws._map(W)
            n, me = ws.n, ws.m_eq
            rows = np.r_[0:n, n + me:G.shape[0]]
            groups.setdefault((n, len(Wi), ws.m_in), []).append((i, G[rows], s0[rows], ws))
        sl = sub.nlp.z_slices
        self.tol = sub.tol
        self.groups = []
        for (n, k, m_in), items in groups.items():
            idx = np.array([np.arange(sl[i].start, sl[i].stop) for i, *_ in items])
            G = np.stack([it[1] for it in items])
            s0 = np.stack([it[2] for it in items])
            A = np.stack([it[3].A_in for it in items]) if m_in else None
            b = np.stack([it[3].b_in for it in items]) if m_in else None
            self.groups.append((n, k, idx, G, s0, A, b))

    def apply(self, q, out):
        """Write all local primal solutions into ``out``; False if a working set became invalid."""
        for n, k, idx, G, s0, A, b in self.groups:
            S = np.matmul(G, q[idx][..., None])[..., 0] + s0
            Y = S[:, :n]
            if k and S[:, n:].min() < -self.tol:
                return False
            if A is not None and (np.matmul(A, Y[..., None])[..., 0] - b).max() > self.tol:
                return False
            out[idx] = Y
        return True


@dataclass
class AdmmState:
    z: np.ndarray
    gamma: np.ndarray
    y: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    l: int
    working_sets: list = field(default_factory=list)
    lam: np.ndarray = None


def admm_run(sub, z0, gamma0, l_max, mode="centralized", bus=None, agents=None,
             warm=None, callback=None, keep_lambda=False, batched=True):
    """Run exactly ``l_max`` ADMM iterations.

    Parameters
    ----------
    sub : AdmmSubproblem
    z0, gamma0 : ndarray
        Initial consensus primal and dual (``gamma0`` should lie in range(E')).
    mode : {'centralized', 'decentralized'}
        Which averaging implementation to use; the local steps are shared.
    warm : list, optional
        Working sets per subsystem used to warm-start the first local solves.
    callback : callable, optional
        Called as ``callback(l, y, z, gamma)`` after every iteration.
    keep_lambda : bool
        Also return the consensus multiplier of the last averaging step
        (only available in centralized mode).
    batched : bool
        Evaluate the local solves as one batched affine map while no working
        set changes; results match the per-subsystem path to rounding.
    """
    nlp = sub.nlp
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    z = np.array(z0, dtype=float)
    gamma = np.array(gamma0, dtype=float)
    if z.size != nlp.n or gamma.size != nlp.n:
        raise DimensionMismatch("z0 and gamma0 must have length n")
    rho = sub.rho
    sl = nlp.z_slices
    if mode == "centralized":
        op = AveragingOperator(nlp)
    elif mode == "decentralized":
        agents = make_agents(nlp) if agents is None else agents
        bus = MessageBus() if bus is None else bus
    else:
        raise ValueError(f"unknown averaging mode {mode!r}")
    sols = list(warm) if warm is not None else [None] * sub.S
    lam = None
    fast = None
    y = np.empty(nlp.n)
    stale = False
    for l in range(l_max):
        if fast is not None:
            if fast.apply(sub.const_all + gamma - rho * z, y):
                stale = True
            else:
                fast = None
        if fast is None:
            for i in range(sub.S):
                sols[i] = sub.local_solve(i, z[sl[i]], gamma[sl[i]], sols[i])
            y = np.concatenate([s.y for s in sols])
            stale = False
            if batched:
                fast = sub.batched([s.working_set for s in sols])
        z_prev, gamma_prev = z, gamma
        if mode == "centralized":
            z, lam = averaging_centralized(y, gamma, op, rho)
        else:
            bus.context = {"admm_iteration": l}
            v = y + gamma / rho
            z = np.concatenate(averaging_decentralized(agents, [v[s] for s in sl], bus))
        gamma = dual_update(y, z, gamma, rho)
        if callback is not None:
            callback(l, y, z, gamma)
    if stale:
        # multipliers of the last local solves, at the inputs of the last iteration
        for i in range(sub.S):
            sols[i] = sub.local_solve(i, z_prev[sl[i]], gamma_prev[sl[i]], sols[i])
    nu = np.concatenate([s.nu for s in sols] + [np.zeros(0)])
    mu = np.concatenate([s.mu for s in sols] + [np.zeros(0)])
    return AdmmState(z, gamma, y, nu, mu, l_max, [s.working_set for s in sols],
                     lam if keep_lambda else None)

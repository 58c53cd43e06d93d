"""Independent reference computations used by the tests."""

import itertools

import numpy as np
import scipy.linalg


def random_convex_qp(rng, n, m_eq, m_in, slack=1.0):
    """Strictly convex QP with a known feasible point; returns (H, q, A_eq, b_eq, A_in, b_in)."""
    M = rng.standard_normal((n, n))
    H = M @ M.T + 0.5 * np.eye(n)
    q = rng.standard_normal(n)
    A_eq = rng.standard_normal((m_eq, n))
    A_in = rng.standard_normal((m_in, n))
    y0 = rng.standard_normal(n)
    b_eq = A_eq @ y0
    b_in = A_in @ y0 + slack * rng.random(m_in)
    return H, q, A_eq, b_eq, A_in, b_in


def enumerate_qp(H, q, A_eq, b_eq, A_in, b_in, tol=1e-9):
    """Solve a strictly convex QP by trying every active set.

    Returns ``(y, nu, mu, active)`` for the feasible, dual-feasible candidate
    with the lowest objective.
    """
    n, m_eq, m_in = H.shape[0], A_eq.shape[0], A_in.shape[0]
    best = None
    for k in range(m_in + 1):
        for act in itertools.combinations(range(m_in), k):
            A = np.vstack([A_eq, A_in[list(act)]])
            b = np.concatenate([b_eq, b_in[list(act)]])
            m = A.shape[0]
            if m > n or (m and np.linalg.matrix_rank(A) < m):
                continue
            K = np.block([[H, A.T], [A, np.zeros((m, m))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-q, b]))
            except np.linalg.LinAlgError:
                continue
            y, mult = sol[:n], sol[n:]
            if np.any(A_in @ y - b_in > tol) or np.any(mult[m_eq:] < -tol):
                continue
            mu = np.zeros(m_in)
            mu[list(act)] = mult[m_eq:]
            val = 0.5 * y @ H @ y + q @ y
            if best is None or val < best[0] - 1e-12:
                best = (val, y, mult[:m_eq], mu, act)
    if best is None:
        raise ValueError("no feasible active set")
    return best[1:]


def consensus_pairs(nlp):
    """Enumerate ``(original global index, copy global index)`` pairs from the OCP layouts.

    Walks the in-neighbour lists of each OCP subsystem instead of reading ``E``.
    """
    pairs = []
    for i, s in enumerate(nlp.subsystems):
        for b, block in enumerate(s.copy_blocks):
            j = sorted(nlp.in_neighbors[i])[b]
            orig = nlp.subsystems[j]
            for t in range(block.shape[0]):
                for c in range(block.shape[1]):
                    pairs.append((nlp.z_offsets[j] + orig.x_idx[t, c], nlp.z_offsets[i] + block[t, c]))
    return pairs


def chain_layout(S, N, n_x=4, n_u=1, copy_horizon=None, input_horizon=None):
    """Global offset of ``u_i(0)`` for every cart of a pendulum chain, computed from sizes alone."""
    T_u = N if input_horizon is None else input_horizon
    T_v = N if copy_horizon is None else copy_horizon
    offsets, off = [], 0
    for i in range(S):
        n_nbr = (i > 0) + (i < S - 1)
        offsets.append(off + (N + 1) * n_x)
        off += (N + 1) * n_x + T_u * n_u + T_v * n_nbr
    return offsets


def dense_avg(E):
    E = np.asarray(E, dtype=float)
    return np.eye(E.shape[1]) - E.T @ scipy.linalg.solve(E @ E.T, E, assume_a="pos")

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsqp_rti.errors import CouplingError, DimensionMismatch
from dsqp_rti.nlp import (
    FunctionSubsystem,
    LinearModel,
    OcpSpec,
    PartitionedNlp,
    PrimalDualPoint,
    QuadraticSubsystem,
    assemble_nlp,
    check_derivatives,
    kkt_residual,
)

from conftest import chain_spec
from oracles import consensus_pairs


def example1():
    """Two scalar subsystems over one step; the second has no input and copies x1(0)."""
    m1 = LinearModel([[0.5]], [[1.0]])
    m2 = LinearModel([[0.5]], np.zeros((1, 0)), [[1.0]])
    spec = OcpSpec([m1, m2], [np.eye(1)] * 2, [np.eye(1), np.zeros((0, 0))], [np.eye(1)] * 2,
                   [[], [(0, [0])]], N=1, h=1.0)
    return assemble_nlp(spec, [[1.0], [2.0]])


def two_scalar_consensus():
    """f1 = (y1 - 1)^2/2, f2 = (y2 - 3)^2/2, y1 = y2."""
    subs = [QuadraticSubsystem(np.eye(1), [-1.0]), QuadraticSubsystem(np.eye(1), [-3.0])]
    return PartitionedNlp(subs, links=[(0, 0, 1, 0)])


def test_example1_coupling_matrices():
    nlp = example1()
    assert [s.n for s in nlp.subsystems] == [3, 3]
    np.testing.assert_array_equal(nlp.E_blocks[0].toarray(), [[1, 0, 0]])
    np.testing.assert_array_equal(nlp.E_blocks[1].toarray(), [[0, 0, -1]])
    np.testing.assert_array_equal(nlp.c, [0.0])


def test_single_subsystem_has_no_coupling():
    spec = chain_spec(S=1, N=3)
    nlp = assemble_nlp(spec, [np.zeros(4)])
    assert nlp.n_c == 0 and nlp.E.shape == (0, nlp.n)
    assert nlp.subsystems[0].v_idx.size == 0


def test_three_chain_pairs_match_enumeration():
    spec = chain_spec(S=3, N=2)
    nlp = assemble_nlp(spec, [np.zeros(4)] * 3)
    T_v = nlp.subsystems[0].N_v
    assert nlp.n_c == 2 * (3 - 1) * T_v
    # middle cart copies both neighbours' positions
    assert nlp.subsystems[1].copy_dims == (1, 1)
    assert nlp.in_neighbors[1] == [0, 2]
    E = nlp.E.tocoo()
    rows = {}
    for r, c, v in zip(E.row, E.col, E.data):
        rows.setdefault(r, {})[v] = c
    got = sorted((d[1.0], d[-1.0]) for d in rows.values())
    assert got == sorted(consensus_pairs(nlp))


def test_copy_blocks_ordered_by_neighbour():
    spec = chain_spec(S=3, N=2)
    nlp = assemble_nlp(spec, [np.zeros(4)] * 3)
    mid = nlp.subsystems[1]
    left, right = mid.copy_blocks
    assert left.max() < right.min()


def test_coupling_invariants_on_chain():
    nlp = assemble_nlp(chain_spec(S=5, N=4), [np.zeros(4)] * 5)
    E = nlp.E.tocsr()
    for r in range(nlp.n_c):
        vals = E.data[E.indptr[r]:E.indptr[r + 1]]
        assert sorted(vals.tolist()) == [-1.0, 1.0]
    rng = np.random.default_rng(0)
    z = nlp.make_consistent(rng.standard_normal(nlp.n))
    assert np.max(np.abs(nlp.E @ z)) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_split_stack_round_trip(seed):
    nlp = assemble_nlp(chain_spec(S=3, N=2), [np.zeros(4)] * 3)
    rng = np.random.default_rng(seed)
    p = PrimalDualPoint(rng.standard_normal(nlp.n), rng.standard_normal(nlp.n_g),
                        rng.standard_normal(nlp.n_h), rng.standard_normal(nlp.n_c))
    q = PrimalDualPoint.from_parts(nlp, p.split(nlp), lam=p.lam)
    assert q.vector().tobytes() == p.vector().tobytes()


def test_callbacks_deterministic():
    nlp = assemble_nlp(chain_spec(S=3, N=3), [np.array([0.1, 0, 3.0, 0])] * 3)
    z = np.random.default_rng(1).standard_normal(nlp.n)
    s = nlp.subsystems[1]
    zi = z[nlp.z_slices[1]]
    nu = np.ones(s.n_g)
    assert s.g(zi).tobytes() == s.g(zi).tobytes()
    assert s.jac_g(zi).tobytes() == s.jac_g(zi).tobytes()
    assert s.hess_lagrangian(zi, nu, np.zeros(s.n_h)).tobytes() == s.hess_lagrangian(zi, nu, np.zeros(s.n_h)).tobytes()


def test_assemble_dimension_mismatch():
    spec = chain_spec(S=3, N=2)
    with pytest.raises(DimensionMismatch):
        assemble_nlp(spec, [np.zeros(4)] * 2)
    with pytest.raises(DimensionMismatch):
        assemble_nlp(spec, [np.zeros(3)] * 3)


def test_rejects_non_two_assigned_row():
    subs = [QuadraticSubsystem(np.eye(2), None), QuadraticSubsystem(np.eye(1), None)]
    with pytest.raises(CouplingError):
        PartitionedNlp(subs, E=np.array([[1.0, -1.0, 0.0]]))


def test_rejects_rank_deficient_coupling():
    subs = [QuadraticSubsystem(np.eye(1), None), QuadraticSubsystem(np.eye(1), None)]
    with pytest.raises(CouplingError):
        PartitionedNlp(subs, links=[(0, 0, 1, 0), (0, 0, 1, 0)])


def test_kkt_residual_at_hand_solution():
    nlp = two_scalar_consensus()
    p = PrimalDualPoint(np.array([2.0, 2.0]), np.zeros(0), np.zeros(0), np.array([-1.0]))
    assert kkt_residual(nlp, p) <= 1e-10


def test_kkt_residual_at_solution(setpoint_problem):
    nlp, p = setpoint_problem
    assert kkt_residual(nlp, p) <= 1e-8


def test_kkt_residual_sees_constraint_violation(case1_first_step):
    _, nlp, p = case1_first_step
    q = p.copy()
    # perturb a predicted state: the dynamics residual that contains it jumps
    k = nlp.z_offsets[0] + nlp.subsystems[0].x_idx[3, 2]
    q.z[k] += 0.1
    g = np.abs(nlp.g(q.z))
    assert kkt_residual(nlp, q) >= g.max() >= 0.1 - 1e-12


def test_kkt_residual_dimension_mismatch():
    nlp = two_scalar_consensus()
    with pytest.raises(DimensionMismatch):
        kkt_residual(nlp, PrimalDualPoint(np.zeros(3), np.zeros(0), np.zeros(0), np.zeros(1)))


def test_derivatives_quadratic_exact():
    rng = np.random.default_rng(2)
    M = rng.standard_normal((4, 4))
    sub = QuadraticSubsystem(M @ M.T + np.eye(4), rng.standard_normal(4), A_in=rng.standard_normal((2, 4)),
                             b_in=np.ones(2))
    nlp = PartitionedNlp([sub])
    rep = check_derivatives(nlp, rng.standard_normal(4))
    assert rep.errors[0]["hess_lagrangian"] <= 1e-9
    assert rep.ok(1e-8)


def test_derivatives_pendulum_at_origin():
    nlp = assemble_nlp(chain_spec(S=3, N=3), [np.zeros(4)] * 3)
    rep = check_derivatives(nlp, np.zeros(nlp.n))
    assert max(e["jac_g"] for e in rep.errors) <= 1e-5
    assert rep.ok(1e-5)


def test_derivatives_sine_constraint():
    sub = FunctionSubsystem(
        1, f=lambda z: 0.5 * z[0] ** 2, grad=lambda z: z, hess=lambda z: np.eye(1),
        g=lambda z: np.array([np.sin(z[0]) - 0.5]), jac_g=lambda z: np.array([[np.cos(z[0])]]),
        g_hess=lambda z, nu: np.array([[-nu[0] * np.sin(z[0])]]),
    )
    rep = check_derivatives(PartitionedNlp([sub]), np.array([np.pi / 4]))
    assert rep.ok(1e-5)


def test_derivatives_at_random_points():
    nlp = assemble_nlp(chain_spec(S=3, N=2), [np.zeros(4)] * 3)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        z = rng.uniform(-1.0, 1.0, nlp.n)
        worst = max(worst, check_derivatives(nlp, z).worst)
    assert worst <= 1e-5


def test_gauss_newton_pair_consistent():
    nlp = assemble_nlp(chain_spec(S=2, N=3), [np.zeros(4)] * 2)
    s = nlp.subsystems[0]
    z = np.zeros(s.n)
    M, _ = s.gn_pair(z)
    B = s.gn_hessian(z)
    np.testing.assert_allclose(B, M.T @ M, atol=1e-12)
    assert np.linalg.eigvalsh(B).min() > 0

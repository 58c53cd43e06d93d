import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsqp_rti.admm import (
    AdmmSubproblem,
    AveragingOperator,
    MessageBus,
    admm_run,
    averaging_centralized,
    averaging_decentralized,
    dual_update,
    make_agents,
)
from dsqp_rti.certificates import certificate_inputs, compute_contraction
from dsqp_rti.dsqp import build_qp, solve_qp_centralized
from dsqp_rti.errors import MissingMessage
from dsqp_rti.nlp import PartitionedNlp, QuadraticSubsystem, assemble_nlp

from conftest import chain_spec
from oracles import dense_avg
from test_nlp import example1


def rowspace_residual(E, gamma):
    E = E.toarray()
    lam, *_ = np.linalg.lstsq(E.T, gamma, rcond=None)
    return np.linalg.norm(gamma - E.T @ lam)


def chain_qp(S=3, N=3, seed=0):
    """Local QPs of a small pendulum OCP linearised at a random point."""
    X0 = np.zeros((S, 4))
    X0[:, 0] = np.linspace(-0.5, 0.5, S)
    X0[:, 2] = 0.3
    nlp = assemble_nlp(chain_spec(S=S, N=N), list(X0))
    rng = np.random.default_rng(seed)
    p = nlp.zero_point(nlp.initial_guess() + 0.01 * rng.standard_normal(nlp.n))
    return nlp, build_qp(nlp, p, "gauss_newton")


def test_example1_averaging_matrix():
    op = AveragingOperator(example1())
    expected = np.eye(6)
    expected[0, 0] = expected[0, 5] = expected[5, 0] = expected[5, 5] = 0.5
    assert np.max(np.abs(op.matrix() - expected)) <= 1e-12


def test_uncoupled_operator_is_identity():
    nlp = PartitionedNlp([QuadraticSubsystem(np.eye(2), None)])
    op = AveragingOperator(nlp)
    np.testing.assert_array_equal(op.matrix(), np.eye(2))
    y = np.array([1.0, 2.0])
    z, lam = averaging_centralized(y, np.zeros(2), op, 1.0)
    np.testing.assert_array_equal(z, y)
    assert lam.size == 0


def test_two_scalar_operator():
    nlp = PartitionedNlp([QuadraticSubsystem(np.eye(1), None)] * 2, links=[(0, 0, 1, 0)])
    op = AveragingOperator(nlp)
    np.testing.assert_allclose(op.matrix(), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)
    z, _ = averaging_centralized(np.array([1.0, 3.0]), np.array([0.5, -0.5]), op, 0.5)
    np.testing.assert_allclose(z, [2.0, 2.0])


def test_operator_identities_on_chain():
    nlp = assemble_nlp(chain_spec(S=5, N=3), [np.zeros(4)] * 5)
    M = AveragingOperator(nlp).matrix()
    assert np.max(np.abs(M @ M - M)) <= 1e-12
    assert np.max(np.abs(nlp.E.toarray() @ M)) <= 1e-12
    np.testing.assert_allclose(M, dense_avg(nlp.E.toarray()), atol=1e-12)


def test_multiplier_formula_with_offset():
    subs = [QuadraticSubsystem(np.eye(2), None), QuadraticSubsystem(np.eye(2), None)]
    nlp = PartitionedNlp(subs, links=[(0, 0, 1, 0), (0, 1, 1, 1)], c=[0.3, -0.2])
    op = AveragingOperator(nlp)
    rng = np.random.default_rng(0)
    y, gamma, rho = rng.standard_normal(4), rng.standard_normal(4), 2.0
    z, lam = averaging_centralized(y, gamma, op, rho)
    E = nlp.E.toarray()
    EEt_inv = np.linalg.inv(E @ E.T)
    v = y + gamma / rho
    np.testing.assert_allclose(z, dense_avg(E) @ v + E.T @ EEt_inv @ nlp.c, atol=1e-14)
    np.testing.assert_allclose(lam, EEt_inv @ E @ (rho * v) - EEt_inv @ (rho * nlp.c), atol=1e-14)
    np.testing.assert_allclose(E @ z, nlp.c, atol=1e-14)


def test_example1_decentralized_average():
    nlp = example1()
    rng = np.random.default_rng(1)
    y, gamma, rho = rng.standard_normal(6), rng.standard_normal(6), 1.0
    z_c, _ = averaging_centralized(y, gamma, AveragingOperator(nlp), rho)
    v = y + gamma / rho
    bus = MessageBus(record=True)
    z_d = np.concatenate(averaging_decentralized(make_agents(nlp), [v[:3], v[3:]], bus))
    assert z_d[0] == z_d[5] == (v[0] + v[5]) / 2
    # same value up to the rounding of the projection formula
    assert np.max(np.abs(z_d - z_c)) <= 1e-15
    # copy holder -> owner, then owner -> copy holder
    assert [e["edge"] for e in bus.transcript] == [[1, 0], [0, 1]]


def test_uncoupled_entries_pass_through():
    nlp = example1()
    v = np.arange(6.0)
    z = np.concatenate(averaging_decentralized(make_agents(nlp), [v[:3], v[3:]], MessageBus()))
    np.testing.assert_array_equal(z[1:5], v[1:5])


def test_chain_decentralized_matches_centralized():
    nlp = assemble_nlp(chain_spec(S=20), [np.zeros(4)] * 20)
    rng = np.random.default_rng(2)
    op, agents = AveragingOperator(nlp), make_agents(nlp)
    for rho in (0.1, 1.0, 10.0):
        y, gamma = rng.standard_normal(nlp.n), rng.standard_normal(nlp.n)
        z_c, _ = averaging_centralized(y, gamma, op, rho)
        v = y + gamma / rho
        z_d = np.concatenate(averaging_decentralized(agents, [v[s] for s in nlp.z_slices], MessageBus()))
        assert np.max(np.abs(z_d - z_c)) <= 1e-12


def test_missing_message_is_an_error():
    nlp = example1()
    bus = MessageBus(drop=lambda rnd, src, dst: rnd == 0)
    with pytest.raises(MissingMessage):
        averaging_decentralized(make_agents(nlp), [np.zeros(3), np.zeros(3)], bus)


def test_dual_update_examples():
    g = np.array([0.5, -1.0])
    np.testing.assert_array_equal(dual_update(np.ones(2), np.ones(2), g, 3.0), g)
    np.testing.assert_array_equal(dual_update(np.array([1.0, 0.0]), np.zeros(2), np.zeros(2), 1.0), [1.0, 0.0])


def test_dual_update_stays_in_row_space():
    nlp = assemble_nlp(chain_spec(S=4, N=3), [np.zeros(4)] * 4)
    op = AveragingOperator(nlp)
    rng = np.random.default_rng(3)
    lam0 = rng.standard_normal(nlp.n_c)
    gamma = nlp.E.T @ lam0
    y = rng.standard_normal(nlp.n)
    z, lam = averaging_centralized(y, gamma, op, 1.0)
    g_next = dual_update(y, z, gamma, 1.0)
    assert np.max(np.abs(g_next - nlp.E.T @ lam)) <= 1e-10


def test_two_scalar_consensus_converges():
    subs = [QuadraticSubsystem(np.eye(1), [-1.0]), QuadraticSubsystem(np.eye(1), [-3.0])]
    nlp = PartitionedNlp(subs, links=[(0, 0, 1, 0)])
    lins = [s.linearize(np.zeros(1), np.zeros(0), np.zeros(0)) for s in subs]
    sub = AdmmSubproblem(nlp, lins, [np.zeros(1)] * 2, 1.0)
    st_ = admm_run(sub, np.zeros(2), np.zeros(2), 30)
    assert np.max(np.abs(st_.z - 2.0)) <= 1e-6


def test_fixed_point_at_qp_solution():
    nlp, qpl = chain_qp()
    p_qp, _ = solve_qp_centralized(nlp, qpl, tol=1e-12)
    sub = AdmmSubproblem(nlp, qpl.lins, nlp.split(qpl.z), 1.0, tol=1e-12)
    gamma0 = nlp.E.T @ p_qp.lam
    worst = []
    admm_run(sub, p_qp.z, gamma0, 20,
             callback=lambda l, y, z, g: worst.append(max(np.max(np.abs(z - p_qp.z)), np.max(np.abs(g - gamma0)))))
    assert max(worst) <= 1e-8


def test_batched_and_plain_paths_agree():
    nlp, qpl = chain_qp(S=4)
    sub = AdmmSubproblem(nlp, qpl.lins, nlp.split(qpl.z), 1.0)
    a = admm_run(sub, qpl.z, np.zeros(nlp.n), 40, batched=True)
    b = admm_run(sub, qpl.z, np.zeros(nlp.n), 40, batched=False)
    for name in ("z", "gamma", "nu", "mu"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rho=st.sampled_from([0.1, 1.0, 10.0]), mode=st.sampled_from(["centralized", "decentralized"]))
def test_consensus_and_rowspace_invariants(seed, rho, mode):
    nlp, qpl = chain_qp(S=3, N=2, seed=seed)
    sub = AdmmSubproblem(nlp, qpl.lins, nlp.split(qpl.z), rho)
    rng = np.random.default_rng(seed)
    gamma0 = nlp.E.T @ rng.standard_normal(nlp.n_c)
    bad = []

    def check(l, y, z, gamma):
        bad.append((np.max(np.abs(nlp.E @ z - nlp.c)), rowspace_residual(nlp.E, gamma)))

    admm_run(sub, qpl.z + rng.standard_normal(nlp.n), gamma0, 12, mode=mode, callback=check)
    assert max(b[0] for b in bad) <= 1e-10
    assert max(b[1] for b in bad) <= 1e-10


def test_decentralized_run_equals_centralized_run():
    nlp, qpl = chain_qp(S=5, N=3)
    sub = AdmmSubproblem(nlp, qpl.lins, nlp.split(qpl.z), 1.0)
    hist = {"centralized": [], "decentralized": []}
    for mode, h in hist.items():
        admm_run(sub, qpl.z, np.zeros(nlp.n), 15, mode=mode,
                 callback=lambda l, y, z, g, h=h: h.append(np.concatenate([z, g])))
    diff = max(np.max(np.abs(a - b)) for a, b in zip(*hist.values()))
    assert diff <= 1e-12


def test_case1_subproblem_contracts(case1_first_step):
    rc, nlp, p_star = case1_first_step
    inputs, sub = certificate_inputs(nlp, p_star, 1.0, "auto")
    con = compute_contraction(inputs)
    qpl = build_qp(nlp, p_star, "auto")
    p_qp, _ = solve_qp_centralized(nlp, qpl, tol=1e-12)
    w_star = np.concatenate([p_qp.z, nlp.E.T @ p_qp.lam])
    rng = np.random.default_rng(0)
    z0 = p_qp.z + 1e-3 * rng.standard_normal(nlp.n)
    errs = [np.linalg.norm(np.concatenate([z0, nlp.E.T @ p_qp.lam]) - w_star)]
    admm_run(sub, z0, nlp.E.T @ p_qp.lam, 60,
             callback=lambda l, y, z, g: errs.append(np.linalg.norm(np.concatenate([z, g]) - w_star)))
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    assert np.all(ratios <= 1.0 + 1e-9)
    assert ratios.max() <= con.norm + 1e-9
    assert (errs[-1] / errs[0]) ** (1 / 60) <= con.spectral_radius + 1e-9

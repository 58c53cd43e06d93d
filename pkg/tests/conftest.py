import numpy as np
import pytest

from dsqp_rti.dsqp import solve_to_kkt
from dsqp_rti.harness import RunConfig
from dsqp_rti.nlp import assemble_nlp
from dsqp_rti.pendulum import PendulumChainParams, design_terminal, pendulum_ocp_spec

Q_PEND = np.diag([1.0, 1e-4, 10.0, 1e-4])
R_PEND = np.array([[1e-3]])


def chain_spec(S=20, N=10, h=0.04, **kw):
    params = PendulumChainParams(S=S)
    design = design_terminal(params, Q_PEND, R_PEND, h)
    return pendulum_ocp_spec(params, N, h, Q_PEND, R_PEND, design.P_blocks[0], beta2=design.beta2, **kw)


@pytest.fixture(scope="session")
def setpoint_problem():
    """20-cart OCP at the upright equilibrium and its KKT point."""
    spec = chain_spec()
    nlp = assemble_nlp(spec, [np.zeros(4)] * 20)
    return nlp, solve_to_kkt(nlp, nlp.zero_point())


@pytest.fixture(scope="session")
def case1_first_step():
    """Case-1 OCP at t = 0 and the converged solution dSQP starts from."""
    rc = RunConfig.from_dict({"case": "case1"})
    spec, _ = rc.build_spec()
    nlp = assemble_nlp(spec, list(rc.x0))
    return rc, nlp, solve_to_kkt(nlp, nlp.zero_point(nlp.initial_guess()))


@pytest.fixture(scope="session")
def case1_log():
    """Closed-loop log of case 1 under its bundled settings (about a minute)."""
    from dsqp_rti.harness import run_closed_loop

    return run_closed_loop(RunConfig.from_dict({"case": "case1"}))


# acceptance criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

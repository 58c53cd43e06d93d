"""Decentralized real-time NMPC: dSQP (SQP outer loop, consensus ADMM inner loop),
certificate calculators and a coupled inverted-pendulum closed-loop simulator.

The numerical kernels exist in a compiled and a pure-Python version;
``dsqp_rti.kernels.BACKEND`` names the one picked at import.
"""

from . import kernels
from .admm import (
    AdmmState,
    AdmmSubproblem,
    AveragingOperator,
    MessageBus,
    admm_run,
    averaging_centralized,
    averaging_decentralized,
    dual_update,
    make_agents,
)
from .certificates import (
    Certificate,
    QpCertificateInputs,
    accuracy_for_lmax,
    c1_constant,
    certify_qp,
    compute_contraction,
    compute_d2,
    d1_constant,
    estimate_rti_constants,
    lmax_bound,
    rti_constants,
)
from .config import SCHEMA_VERSION, load_config
from .dsqp import (
    DsqpResult,
    DsqpSettings,
    build_qp,
    check_regularity,
    dsqp_run,
    solve_to_kkt,
)
from .errors import *  # noqa: F401,F403
from .harness import ClosedLoopLog, RunConfig, emit_reports, extract_input, run_closed_loop
from .nlp import (
    OcpSpec,
    PartitionedNlp,
    PrimalDualPoint,
    SubsystemProblem,
    assemble_nlp,
    check_derivatives,
    kkt_residual,
)
from .pendulum import (
    PendulumChainParams,
    TerminalDesign,
    beta2_search,
    design_terminal,
    linearize_discrete,
    pendulum_ode,
    riccati_design,
    rk4_step,
)
from .qp import DenseQp, QpSolution, solve, solve_equality_kkt

__version__ = "0.1.0"

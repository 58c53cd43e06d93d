"""Closed-loop NMPC with real-time dSQP on the coupled pendulum chain.

Each control step samples the plant state, runs ``k_max`` dSQP iterations
warm-started from the previous step, applies the first input of every
subsystem and integrates the fully coupled plant over one interval. The OCP
model freezes neighbour positions over each shooting interval while the plant
does not, so the prediction model is deliberately inexact.
"""

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .admm import MessageBus, make_agents
from .config import initial_state, load_config
from .dsqp import DsqpSettings, dsqp_run, solve_to_kkt, write_trace
from .errors import ConstraintViolation, DimensionMismatch, Diverged, DsqpError, MaxIterations
from .nlp import assemble_nlp, kkt_residual
from .pendulum import PendulumChainParams, design_terminal, pendulum_ocp_spec, plant_step

__all__ = [
    "ClosedLoopLog",
    "RunConfig",
    "emit_reports",
    "extract_input",
    "run_closed_loop",
    "stage_costs",
]

INPUT_TOL = 1e-6
# reference solves that stall between the SQP tolerance and this are still usable
REFERENCE_TOL = 1e-6


@dataclass
class RunConfig:
    """Everything a closed-loop run needs; build with :meth:`from_dict` or :meth:`load`."""

    raw: dict
    params: PendulumChainParams
    Q: np.ndarray
    R: np.ndarray
    settings: DsqpSettings
    delta: float
    T_f: float
    x0: np.ndarray
    mode: str = "centralized"
    reference: bool = False
    seed: int = 0
    record_transcript: bool = False
    trace: bool = False

    @classmethod
    def from_dict(cls, raw, **overrides):
        cfg = load_config(raw)
        p, o, s, sim = cfg["plant"], cfg["ocp"], cfg["solver"], cfg["simulation"]
        params = PendulumChainParams(
            S=int(p["S"]), M_c=p["M_c"], m=p["m"], l=p["l"], k_spring=p["k_spring"], g=p["g"],
            u_max=p["u_max"],
        )
        settings = DsqpSettings(
            k_max=int(s["k_max"]), l_max=int(s["l_max"]), rho=float(s["rho"]),
            hessian_mode=s["hessian_mode"], qp_tol=float(s["qp_tol"]), eps_reg=float(s["eps_reg"]),
            auto_test=s["auto_test"],
        )
        rc = cls(cfg, params, np.diag(o["Q"]).astype(float), np.diag(o["R"]).astype(float), settings,
                 float(sim["delta"]), float(sim["T_f"]), initial_state(cfg), seed=int(cfg["seed"]))
        for k, v in overrides.items():
            if not hasattr(rc, k):
                raise TypeError(f"unknown override {k!r}")
            setattr(rc, k, v)
        if rc.mode not in ("centralized", "decentralized"):
            raise ValueError("mode must be 'centralized' or 'decentralized'")
        return rc

    @classmethod
    def load(cls, path, **overrides):
        return cls.from_dict(load_config(path), **overrides)

    @property
    def ocp(self):
        return self.raw["ocp"]

    @property
    def n_steps(self):
        """``t_n = T_f / delta``."""
        return int(round(self.T_f / self.delta))

    def terminal_design(self):
        o = self.ocp
        delta = o["h"] if o["terminal_delta"] is None else o["terminal_delta"]
        return design_terminal(self.params, self.Q, self.R, float(delta), mu=float(o["mu"]),
                               step=float(o["beta2_step"]))

    def build_spec(self, design=None):
        o = self.ocp
        design = self.terminal_design() if design is None else design
        beta2 = design.beta2 if o["beta2"] is None else float(o["beta2"])
        spec = pendulum_ocp_spec(self.params, int(o["N"]), float(o["h"]), self.Q, self.R, design.P_blocks[0],
                                 beta=float(o["beta"]), beta2=beta2, copy_weight=float(o["copy_weight"]))
        return spec, design

    def echo(self):
        out = dict(self.raw)
        out["mode"] = self.mode
        out["reference"] = self.reference
        out["seed"] = self.seed
        return out


@dataclass
class ClosedLoopLog:
    """Per-step records of a closed-loop run.

    ``x[t]`` is ``(S, 4)``, ``u[t]`` is ``(S,)``; ``opt_error[t]`` is
    ``|p(t) - p*(t)|`` when a reference was computed, else ``None``.
    """

    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    opt_error: list = field(default_factory=list)
    messages: list = field(default_factory=list)
    bytes: list = field(default_factory=list)
    solve_time: list = field(default_factory=list)
    hessian_modes: list = field(default_factory=list)
    status: str = "empty"
    message: str = ""
    config: dict = field(default_factory=dict)
    design: dict = field(default_factory=dict)
    u_max: float = None
    trace: list = None
    bus: MessageBus = None
    inexact_references: list = field(default_factory=list)

    @property
    def J_cl(self):
        """Average of the summed stage costs over the logged steps, ``None`` when empty."""
        if not self.cost:
            return None
        return float(np.sum(self.cost) / len(self.cost))

    @property
    def X(self):
        return np.array(self.x) if self.x else np.zeros((0, 0, 4))

    @property
    def U(self):
        return np.array(self.u) if self.u else np.zeros((0, 0))

    def upright(self, phi_tol=0.01, q_tol=None):
        """All pendulums within ``phi_tol`` of upright at the last logged step."""
        if not self.x:
            return False
        X = self.x[-1]
        ok = bool(np.all(np.abs(X[:, 2]) <= phi_tol))
        if q_tol is not None:
            ok = ok and bool(np.all(np.abs(X[:, 0]) <= q_tol))
        return ok

    def input_margin(self):
        """``u_max - max |u|`` over the run."""
        if not self.u or self.u_max is None:
            return None
        return float(self.u_max - np.max(np.abs(self.U)))


def stage_costs(X, U, Q, R):
    """Per-subsystem ``x'Qx/2 + u'Ru/2`` for states ``(S, 4)`` and inputs ``(S,)``."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float).reshape(X.shape[0], -1)
    return 0.5 * np.einsum("si,ij,sj->s", X, Q, X) + 0.5 * np.einsum("si,ij,sj->s", U, R, U)


def extract_input(p, nlp):
    """First input block ``u_i(0)`` of every subsystem (a pure selection of entries of ``z``)."""
    z = p.z if hasattr(p, "z") else np.asarray(p)
    if z.size != nlp.n:
        raise DimensionMismatch(f"point has {z.size} entries, layout expects {nlp.n}")
    out = []
    for s, off in zip(nlp.subsystems, nlp.z_offsets):
        out.append(z[off + s.u_idx[0]])
    return np.concatenate(out)


def input_indices(nlp):
    """Global indices of ``u_i(0)`` in ``z``, in subsystem order."""
    return np.concatenate([off + s.u_idx[0] for s, off in zip(nlp.subsystems, nlp.z_offsets)])


def run_closed_loop(config, progress=None):
    """Simulate the closed loop described by ``config`` (a :class:`RunConfig`).

    The first step starts dSQP at a converged centralized solution (computed
    from a trivial primal guess with zero multipliers); later steps reuse the
    previous dSQP iterate and consensus duals unchanged. On solver failure the
    partial log is returned with ``status`` set to ``'diverged'`` or
    ``'failed'``.
    """
    spec, design = config.build_spec()
    params = config.params
    log = ClosedLoopLog(config=config.echo(), design=design.to_dict(), u_max=params.u_max)
    bus = agents = None
    X = np.array(config.x0, dtype=float)
    nlp = assemble_nlp(spec, list(X))
    if config.mode == "decentralized":
        bus = MessageBus(record=config.record_transcript)
        agents = make_agents(nlp)
        log.bus = bus
    log.trace = [] if config.trace else None
    p = gamma = warm = None
    p_ref = None
    log.status = "running"
    for step in range(config.n_steps + 1):
        t = step * config.delta
        if step:
            nlp = nlp.with_initial_state(list(X))
        tic = time.perf_counter()
        m0, b0 = (bus.messages, bus.bytes) if bus is not None else (0, 0)
        try:
            if p is None:
                p = solve_to_kkt(nlp, nlp.zero_point(nlp.initial_guess()))
                p_ref = p
            elif config.reference:
                p_ref = _reference(nlp, p_ref, p, log, t)
            step_trace = [] if log.trace is not None else None
            res = dsqp_run(nlp, p, config.settings, gamma0=gamma, p_ref=p_ref if config.reference else None,
                           mode=config.mode, bus=bus, agents=agents, warm=warm, trace=step_trace)
        except DsqpError as exc:
            log.status = "diverged" if isinstance(exc, Diverged) else "failed"
            log.message = f"t = {t:.3f}: {type(exc).__name__}: {exc}"
            return log
        if step_trace is not None:
            for row in step_trace:
                row["t"] = t
            log.trace.extend(step_trace)
        p, gamma, warm = res.point, res.point.gamma, res.working_sets
        U = extract_input(p, nlp)
        if np.max(np.abs(U)) > params.u_max + INPUT_TOL:
            raise ConstraintViolation(f"t = {t:.3f}: applied input {np.max(np.abs(U)):.9g} exceeds {params.u_max}")
        log.solve_time.append(time.perf_counter() - tic)
        log.t.append(t)
        log.x.append(X.copy())
        log.u.append(U.copy())
        log.cost.append(float(np.sum(stage_costs(X, U, config.Q, config.R))))
        log.opt_error.append(p.distance(p_ref) if config.reference else None)
        log.hessian_modes.append(res.hessian_modes)
        if bus is not None:
            log.messages.append(bus.messages - m0)
            log.bytes.append(bus.bytes - b0)
        if progress is not None:
            progress(step, log)
        if step == config.n_steps:
            break
        X = plant_step(X, U, config.delta, params)
        if not np.all(np.isfinite(X)):
            log.status = "diverged"
            log.message = f"t = {t + config.delta:.3f}: non-finite plant state"
            return log
    log.status = "completed"
    return log


def _reference(nlp, p_prev, p, log, t):
    """Converged OCP solution for the current state.

    Starts from the previous reference so that consecutive references follow
    one branch of solutions, and from the dSQP iterate if that fails. Exact
    Hessian steps keep the solve fast during the swing-up, where Gauss-Newton
    steps contract slowly. A solve
    that stalls between the SQP tolerance and ``REFERENCE_TOL`` is kept and
    noted in the log.
    """
    last = None
    for start in (p_prev, p):
        try:
            return solve_to_kkt(nlp, start, hessian_mode="exact")
        except MaxIterations as exc:
            last = exc
            if exc.best is not None and kkt_residual(nlp, exc.best) <= REFERENCE_TOL:
                log.inexact_references.append(t)
                return exc.best
        except DsqpError as exc:
            last = exc
    raise last


def _fmt(v):
    return repr(float(v))


def emit_reports(log, out_dir):
    """Write ``trajectories.csv``, ``optimizer.csv`` and ``summary.json`` (plus optional extras).

    ``trajectories.csv`` columns: ``t``, then ``q_1..q_S``, ``phi_1..phi_S``,
    ``u_1..u_S``, ``dq_1..dq_S``, ``dphi_1..dphi_S`` (the velocities make the
    stage costs recomputable). ``optimizer.csv`` columns: ``t``, ``opt_error``
    (empty when no reference was computed). ``timing.csv`` holds per-step
    solve times. A recorded message transcript goes to ``transcript.jsonl``
    and a dSQP trace to ``dsqp_trace.csv``.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    S = log.x[0].shape[0] if log.x else int(log.config.get("plant", {}).get("S", 0))
    paths = {}
    path = os.path.join(out_dir, "trajectories.csv")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"q_{i}" for i in range(1, S + 1)] + [f"phi_{i}" for i in range(1, S + 1)]
                       + [f"u_{i}" for i in range(1, S + 1)] + [f"dq_{i}" for i in range(1, S + 1)]
                       + [f"dphi_{i}" for i in range(1, S + 1)])
            for t, X, U in zip(log.t, log.x, log.u):
                w.writerow([_fmt(t)] + [_fmt(v) for v in X[:, 0]] + [_fmt(v) for v in X[:, 2]]
                           + [_fmt(v) for v in U] + [_fmt(v) for v in X[:, 1]] + [_fmt(v) for v in X[:, 3]])
        paths["trajectories"] = path
        path = os.path.join(out_dir, "optimizer.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "opt_error"])
            for t, e in zip(log.t, log.opt_error):
                w.writerow([_fmt(t), "" if e is None else _fmt(e)])
        paths["optimizer"] = path
        path = os.path.join(out_dir, "summary.json")
        with open(path, "w") as fh:
            json.dump(summary(log), fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths["summary"] = path
        # wall-clock times differ between runs, so they stay out of summary.json
        path = os.path.join(out_dir, "timing.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "solve_time"])
            for t, s in zip(log.t, log.solve_time):
                w.writerow([_fmt(t), _fmt(s)])
        paths["timing"] = path
        if log.bus is not None and log.bus.record:
            path = os.path.join(out_dir, "transcript.jsonl")
            log.bus.dump(path)
            paths["transcript"] = path
        if log.trace is not None:
            path = os.path.join(out_dir, "dsqp_trace.csv")
            write_trace(log.trace, path, extra=["t"])
            paths["trace"] = path
    except OSError as exc:
        raise OSError(f"writing {path}: {exc}") from exc
    return paths


def summary(log):
    X = log.X
    errs = [e for e in log.opt_error if e is not None]
    out = {
        "J_cl": log.J_cl,
        "status": log.status,
        "message": log.message,
        "steps": len(log.t),
        "upright": log.upright() if log.x else None,
        "final_max_abs_phi": float(np.max(np.abs(X[-1, :, 2]))) if len(X) else None,
        "final_max_abs_q": float(np.max(np.abs(X[-1, :, 0]))) if len(X) else None,
        "constraint_margins": {
            "input_bound": log.u_max,
            "max_abs_input": float(np.max(np.abs(log.U))) if log.u else None,
            "min_input_margin": log.input_margin(),
        },
        "messages": {
            "total": int(np.sum(log.messages)) if log.messages else 0,
            "total_bytes": int(np.sum(log.bytes)) if log.bytes else 0,
            "per_step_max": int(np.max(log.messages)) if log.messages else 0,
        },
        "optimizer_error": {
            "initial": errs[0] if errs else None,
            "final": errs[-1] if errs else None,
            "max": max(errs) if errs else None,
            "inexact_reference_steps": len(log.inexact_references),
        },
        "terminal_design": log.design,
        "config": log.config,
    }
    return out

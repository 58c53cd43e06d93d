"""Run configuration files (JSON, ``schema_version`` 1).

Layout::

    {
      "schema_version": 1,
      "case": "case1",
      "plant": {"S": 20, "M_c": 2.0, "m": 0.25, "l": 0.2, "k_spring": 0.1,
                "g": 9.81, "u_max": 100.0},
      "ocp": {"N": 10, "h": 0.04, "Q": [1, 1e-4, 10, 1e-4], "R": [1e-3],
              "beta": 1.0, "mu": 1.01, "beta2": null, "beta2_step": 0.1,
              "terminal_delta": null, "copy_weight": 1e-5},
      "initial_condition": {"pattern": "alternating"},
      "solver": {"k_max": 1, "l_max": 6, "rho": 1.0, "hessian_mode": "auto",
                 "auto_test": "full", "qp_tol": 1e-8, "eps_reg": 1e-8},
      "simulation": {"delta": 0.04, "T_f": 10.0},
      "certificate": {"a": 0.5, "n_samples": 64, "epsilon": 0.01,
                      "hessian_mode": "exact", "rti": null},
      "seed": 0
    }

``Q`` and ``R`` are diagonals. ``beta2: null`` runs the terminal design search
with grid ``beta2_step``; ``terminal_delta`` is the interval the terminal cost
is designed for (``null`` means ``h``). Initial positions: ``alternating`` gives ``q_i = (-1)^i``,
``index`` gives ``q_i = i`` (``i = 1..S``), ``zero`` starts at the upright
equilibrium with ``phi = 0``, ``explicit`` takes ``"q": [...]`` and optionally
``"phi"``. Unless ``explicit`` sets ``phi``, pendulums start hanging
(``phi = pi``). ``certificate.rti`` optionally holds estimated inputs of the
real-time-iteration constant chain (``a1, a2, a3, L_Vx, L_px, L_fx_c,
L_fu_c, V_bar, r_p, r_x, delta1``, optionally ``a_p``; ``delta`` is the
control interval and ``a_p`` defaults to ``certificate.a``). Missing sections
take the defaults above.
"""

import copy
import json

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "case": "custom",
    "plant": {"S": 20, "M_c": 2.0, "m": 0.25, "l": 0.2, "k_spring": 0.1, "g": 9.81, "u_max": 100.0},
    "ocp": {
        "N": 10,
        "h": 0.04,
        "Q": [1.0, 1e-4, 10.0, 1e-4],
        "R": [1e-3],
        "beta": 1.0,
        "mu": 1.01,
        "beta2": None,
        "beta2_step": 0.1,
        "terminal_delta": None,
        "copy_weight": 1e-5,
    },
    "initial_condition": {"pattern": "alternating"},
    "solver": {
        "k_max": 1,
        "l_max": 6,
        "rho": 1.0,
        "hessian_mode": "auto",
        "auto_test": "full",
        "qp_tol": 1e-8,
        "eps_reg": 1e-8,
    },
    "simulation": {"delta": 0.04, "T_f": 10.0},
    "certificate": {"a": 0.5, "n_samples": 64, "epsilon": 1e-2, "hessian_mode": "exact", "rti": None},
    "seed": 0,
}

RTI_KEYS = ("a1", "a2", "a3", "L_Vx", "L_px", "L_fx_c", "L_fu_c", "V_bar", "r_p", "r_x", "delta1")

PATTERNS = ("alternating", "index", "zero", "explicit")


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown key {path + k!r}")
        if isinstance(base[k], dict) and k != "initial_condition":
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k!r} must be an object")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(source):
    """Read a config from a path or a dict, fill defaults and validate."""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            with open(source) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source} is not valid JSON: {exc}") from exc
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
    cfg = _merge(DEFAULTS, raw)
    validate(cfg)
    return cfg


def validate(cfg):
    p, o, s, sim = cfg["plant"], cfg["ocp"], cfg["solver"], cfg["simulation"]
    if int(p["S"]) < 1:
        raise ConfigError("plant.S must be >= 1")
    for k in ("M_c", "m", "l", "k_spring", "g", "u_max"):
        if not float(p[k]) > 0:
            raise ConfigError(f"plant.{k} must be positive")
    if int(o["N"]) < 1 or not float(o["h"]) > 0:
        raise ConfigError("ocp.N >= 1 and ocp.h > 0 required")
    if len(o["Q"]) != 4 or len(o["R"]) != 1:
        raise ConfigError("ocp.Q needs 4 diagonal entries and ocp.R one")
    if min(o["Q"]) <= 0 or min(o["R"]) <= 0:
        raise ConfigError("ocp.Q and ocp.R must be positive")
    if float(o["beta"]) < 1 or (o["beta2"] is not None and float(o["beta2"]) < 1):
        raise ConfigError("beta and beta2 must be >= 1")
    if s["hessian_mode"] not in ("exact", "gauss_newton", "auto"):
        raise ConfigError("solver.hessian_mode must be exact, gauss_newton or auto")
    if int(s["k_max"]) < 1 or int(s["l_max"]) < 1 or not float(s["rho"]) > 0:
        raise ConfigError("solver.k_max, solver.l_max >= 1 and solver.rho > 0 required")
    if not float(sim["delta"]) > 0 or float(sim["T_f"]) < float(sim["delta"]):
        raise ConfigError("simulation.delta > 0 and T_f >= delta required")
    c = cfg["certificate"]
    if not 0 < float(c["a"]) < 1 or int(c["n_samples"]) < 1 or not float(c["epsilon"]) > 0:
        raise ConfigError("certificate needs 0 < a < 1, n_samples >= 1 and epsilon > 0")
    if c["rti"] is not None:
        missing = set(RTI_KEYS) - set(c["rti"])
        extra = set(c["rti"]) - set(RTI_KEYS) - {"a_p"}
        if missing or extra:
            raise ConfigError(f"certificate.rti: missing {sorted(missing)}, unknown {sorted(extra)}")
    ic = cfg["initial_condition"]
    if ic.get("pattern") not in PATTERNS:
        raise ConfigError(f"initial_condition.pattern must be one of {PATTERNS}")
    if ic["pattern"] == "explicit" and len(ic.get("q", [])) != int(p["S"]):
        raise ConfigError("explicit initial condition needs one q per subsystem")


def initial_state(cfg):
    """``(S, 4)`` initial states ``(q_i, 0, phi_i, 0)``."""
    S = int(cfg["plant"]["S"])
    ic = cfg["initial_condition"]
    i = np.arange(1, S + 1)
    phi = np.full(S, np.pi)
    pat = ic["pattern"]
    if pat == "alternating":
        q = (-1.0) ** i
    elif pat == "index":
        q = i.astype(float)
    elif pat == "zero":
        q, phi = np.zeros(S), np.zeros(S)
    else:
        q = np.asarray(ic["q"], dtype=float)
        if "phi" in ic:
            phi = np.asarray(ic["phi"], dtype=float).reshape(S)
    X = np.zeros((S, 4))
    X[:, 0], X[:, 2] = q, phi
    return X

"""Command line entry point: ``run``, ``certify`` and ``design-terminal``."""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .certificates import certify_qp, rti_constants
from .dsqp import check_regularity, solve_to_kkt
from .errors import DsqpError
from .harness import RunConfig, emit_reports, run_closed_loop
from .nlp import assemble_nlp

log = logging.getLogger("dsqp_rti")


def _to_json(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _write_json(data, path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_to_json)
        fh.write("\n")


def cmd_run(args):
    rc = RunConfig.load(args.config, mode=args.mode, reference=args.reference,
                        record_transcript=args.transcript, trace=args.trace)
    if args.seed is not None:
        rc.seed = args.seed
    np.random.seed(rc.seed)
    t0 = time.perf_counter()

    def progress(step, lg):
        if step % 25 == 0:
            log.info("t = %.2f s  stage cost %.4g  max|phi| %.4f  (%.1f s)", lg.t[-1], lg.cost[-1],
                     np.max(np.abs(lg.x[-1][:, 2])), time.perf_counter() - t0)

    lg = run_closed_loop(rc, progress)
    paths = emit_reports(lg, args.out)
    print(f"status: {lg.status}" + (f" ({lg.message})" if lg.message else ""))
    print(f"J_cl: {lg.J_cl}")
    print(f"upright at T_f: {lg.upright()}")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0 if lg.status == "completed" else 2


def cmd_certify(args):
    rc = RunConfig.load(args.config)
    cert_cfg = rc.raw["certificate"]
    spec, design = rc.build_spec()
    nlp = assemble_nlp(spec, [np.zeros(4)] * rc.params.S)
    log.info("solving the setpoint OCP")
    p_star = solve_to_kkt(nlp, nlp.zero_point())
    reg = check_regularity(nlp, p_star)
    seed = rc.seed if args.seed is None else args.seed
    log.info("sampling %d QPs", int(cert_cfg["n_samples"]))
    cert = certify_qp(nlp, p_star, rho=rc.settings.rho, a=float(cert_cfg["a"]),
                      n_samples=int(cert_cfg["n_samples"]), eps=float(cert_cfg["epsilon"]), seed=seed,
                      hessian_mode=cert_cfg["hessian_mode"])
    report = {
        "config": rc.echo(),
        "terminal_design": design.to_dict(),
        "regularity": {
            "ok": reg.ok,
            "strict_complementarity_margin": reg.strict_complementarity_margin,
            "licq_sigma_min": reg.licq_sigma_min,
            "reduced_hessian_min_eig": min(reg.reduced_hessian_min_eig),
            "n_active": len(reg.active),
        },
        "certificate": cert.to_dict(),
        "rti": None,
    }
    if cert_cfg["rti"] is not None:
        inputs = dict(cert_cfg["rti"])
        inputs.setdefault("a_p", float(cert_cfg["a"]))
        try:
            report["rti"] = rti_constants(delta=rc.delta, **inputs).to_dict()
        except DsqpError as exc:
            report["rti"] = {"inconclusive": str(exc), "constant": getattr(exc, "constant", None)}
    _write_json(report, args.out)
    print(f"c1 = {cert.c1:.6g}, d1 = {cert.d1:.6g}, d2 = {cert.d2:.6g}, c2 = {cert.c2:.6g}")
    print(f"a_w = {cert.a_w:.8g}, |A| = {cert.norm_A:.6g}, l_max bound = {cert.l_max_bound}")
    print(f"report: {args.out}")
    return 0 if cert.conclusive else 3


def cmd_design_terminal(args):
    rc = RunConfig.load(args.config)
    design = rc.terminal_design()
    out = design.to_dict()
    text = json.dumps(out, indent=2, sort_keys=True, default=_to_json)
    if args.out:
        _write_json(out, args.out)
    print(text)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="dsqp-rti", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate the closed loop")
    r.add_argument("--config", required=True)
    r.add_argument("--mode", choices=("centralized", "decentralized"), default="centralized")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--reference", action="store_true", help="solve every OCP to convergence for optimizer errors")
    r.add_argument("--seed", type=int)
    r.add_argument("--transcript", action="store_true", help="write the message transcript (decentralized mode)")
    r.add_argument("--trace", action="store_true", help="write a per-ADMM-iteration trace")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("certify", help="compute QP and RTI certificate constants at the setpoint")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True, help="report JSON path")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_certify)

    d = sub.add_parser("design-terminal", help="print the terminal weights, controllers and beta2")
    d.add_argument("--config", required=True)
    d.add_argument("--out", help="optional JSON path")
    d.set_defaults(func=cmd_design_terminal)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DsqpError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

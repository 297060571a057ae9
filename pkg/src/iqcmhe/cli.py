"""Command-line front end.

Subcommands: ``verify``, ``horizon``, ``simulate``, ``compare`` and
``iqc-check``. Options can also come from an INI file (``--config``); any
flag given on the command line wins over the file.

Exit codes: 0 success, 1 usage or configuration error, 2 infeasible
detectability problem, 3 solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
from typing import Optional, Sequence

from . import certio, detect, iqc, mhe, sdp, sim
from .model import get_scenario

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# defaults applied after the config file; None means "not given"
DEFAULTS = {
    "scenario": "example1",
    "rho2": 0.86,
    "zf_order": 2,
    "alpha": 0.0,
    "beta": 0.25,
    "with_static": False,
    "static_only": False,
    "nominal": False,
    "eps": 0.1,
    "xi": 500.0,
    "N": "auto",
    "steps": 100,
    "seed": 0,
    "seeds": "0",
    "estimator": "proposed",
    "samples": 1000,
    "length": 10,
    "workers": 1,
    "log": True,
}


def template_from_recipe(scenario_p: int, rho: float, zf_order: Optional[int], alpha: float, beta: float,
                         static: bool) -> iqc.MultiplierTemplate:
    """Zames-Falb of order ``zf_order`` (None to skip), optionally combined with the static polytopic family."""
    parts = []
    if zf_order is not None:
        parts.append(iqc.build_zames_falb_template(int(zf_order), alpha, beta, scenario_p, rho))
    if static:
        parts.append(iqc.build_static_polytopic_template(alpha, beta, scenario_p))
    if not parts:
        raise UsageError("the multiplier recipe is empty")
    return parts[0] if len(parts) == 1 else iqc.combine(parts)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file; keys in its [run] section match the long flags")
    p.add_argument("--scenario", default=None)


def _add_mhe(p: argparse.ArgumentParser):
    p.add_argument("--cert", default=None, help="robust certificate JSON")
    p.add_argument("--nominal-cert", dest="nominal_cert", default=None, help="certificate for the standard estimator")
    p.add_argument("--N", default=None, help='horizon, or "auto" for N_min + 3')
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--xi", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="iqcmhe", description="Robust MHE with IQC-based detectability certificates.")
    sub = ap.add_subparsers(dest="cmd", parser_class=_Parser)

    v = sub.add_parser("verify", help="search a detectability certificate")
    _add_common(v)
    v.add_argument("--rho2", type=float, default=None)
    v.add_argument("--zf-order", dest="zf_order", type=int, default=None)
    v.add_argument("--alpha", type=float, default=None)
    v.add_argument("--beta", type=float, default=None)
    g = v.add_mutually_exclusive_group()
    g.add_argument("--with-static", dest="with_static", action="store_true", default=None)
    g.add_argument("--static-only", dest="static_only", action="store_true", default=None)
    g.add_argument("--nominal", action="store_true", default=None, help="certificate ignoring the uncertainty")
    v.add_argument("--out", default=None, help="certificate path (default cert.json)")

    h = sub.add_parser("horizon", help="minimum horizon of a certificate")
    _add_common(h)
    h.add_argument("--cert", default=None)
    h.add_argument("--eps", type=float, default=None)

    s = sub.add_parser("simulate", help="closed-loop run, trace CSV and optional SVG")
    _add_common(s)
    _add_mhe(s)
    s.add_argument("--estimator", choices=["proposed", "standard"], default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None, help="trace CSV (default trace.csv)")
    s.add_argument("--svg", default=None)
    s.add_argument("--linear", dest="log", action="store_false", default=None, help="linear SVG axes")

    c = sub.add_parser("compare", help="paired runs of the proposed and standard estimators")
    _add_common(c)
    _add_mhe(c)
    c.add_argument("--seeds", default=None, help='comma list, or "a:b" for range(a, b)')
    c.add_argument("--workers", type=int, default=None)
    c.add_argument("--out", default=None, help="summary CSV (default summary.csv)")

    q = sub.add_parser("iqc-check", help="smallest sampled IQC value of a certificate's multiplier")
    _add_common(q)
    q.add_argument("--cert", default=None)
    q.add_argument("--samples", type=int, default=None, help="number of probe trajectories")
    q.add_argument("--length", type=int, default=None)
    q.add_argument("--seed", type=int, default=None)
    return ap


def _merge(args: argparse.Namespace) -> argparse.Namespace:
    conf = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise UsageError(f"config file {args.config} not found")
        cp = configparser.ConfigParser()
        try:
            cp.read(args.config, encoding="utf-8")
        except configparser.Error as exc:
            raise UsageError(f"cannot parse {args.config}: {exc}") from exc
        if cp.has_section("run"):
            conf = {k.replace("-", "_"): v for k, v in cp.items("run")}
    for key, val in vars(args).items():
        if val is not None or key in ("cmd", "config"):
            continue
        if key in conf:
            setattr(args, key, _coerce(key, conf[key]))
        elif key in DEFAULTS:
            setattr(args, key, DEFAULTS[key])
    return args


def _coerce(key: str, raw: str):
    ref = DEFAULTS.get(key)
    try:
        if isinstance(ref, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(ref, int) and not isinstance(ref, bool):
            return int(raw)
        if isinstance(ref, float):
            return float(raw)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {raw!r}") from exc
    return raw.strip()


def _need(args, *names):
    for nm in names:
        if getattr(args, nm, None) is None:
            raise UsageError(f"--{nm.replace('_', '-')} is required")
        if nm.endswith("cert") and not os.path.exists(getattr(args, nm)):
            raise UsageError(f"{getattr(args, nm)} not found")


def _horizon(args, cert) -> int:
    if str(args.N).lower() == "auto":
        return mhe.min_horizon(cert, args.eps)[0] + 3
    try:
        N = int(args.N)
    except ValueError as exc:
        raise UsageError(f"bad horizon {args.N!r}") from exc
    if N < 1:
        raise UsageError("N must be >= 1")
    return N


def _scenario(args):
    try:
        return get_scenario(args.scenario)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc


def cmd_verify(args, out) -> int:
    sc = _scenario(args)
    if not 0 < args.rho2 < 1:
        raise UsageError("rho2 must lie in (0, 1)")
    rho = math.sqrt(args.rho2)
    if args.nominal:
        cert = detect.verify_nominal(sc, rho)
    else:
        zf = None if args.static_only else args.zf_order
        static = bool(args.with_static or args.static_only)
        cert = detect.verify_detectability(sc, template_from_recipe(sc.plant.p, rho, zf, args.alpha, args.beta, static), rho)
    path = args.out or "cert.json"
    certio.save(cert, path)
    print(f"margin {cert.margin:.6e}", file=out)
    print(f"certificate written to {path}", file=out)
    return EXIT_OK


def cmd_horizon(args, out) -> int:
    _need(args, "cert")
    cert = certio.load(args.cert)
    n_min, lam_bar = mhe.min_horizon(cert, args.eps)
    print(f"N_min {n_min}", file=out)
    print(f"lambda_bar {lam_bar:.17g}", file=out)
    return EXIT_OK


def _estimator(args, kind: str, N: Optional[int] = None):
    if kind == "proposed":
        _need(args, "cert")
        cert = certio.load(args.cert)
    else:
        _need(args, "nominal_cert")
        cert = certio.load(args.nominal_cert)
    N = _horizon(args, cert) if N is None else N
    cfg = mhe.MheConfig(N=N, eps=args.eps, xi=args.xi)
    return (sim.ProposedEstimator if kind == "proposed" else sim.StandardEstimator)(cert, cfg)


def cmd_simulate(args, out) -> int:
    sc = _scenario(args)
    est = _estimator(args, args.estimator)
    try:
        trace = sim.run_closed_loop(sc, est, args.steps, args.seed)
    except sim.SimulationAborted as exc:
        _write(args.out or "trace.csv", sim.trace_to_csv(exc.trace))
        raise
    text = sim.trace_to_csv(trace)
    _write(args.out or "trace.csv", text)
    if args.svg:
        _write(args.svg, sim.svg_from_csv(text, log=args.log))
    print(f"trace written to {args.out or 'trace.csv'} ({trace.steps} steps)", file=out)
    return EXIT_OK


def _parse_seeds(spec: str) -> list:
    spec = str(spec).strip()
    try:
        if ":" in spec:
            a, b = spec.split(":", 1)
            return list(range(int(a), int(b)))
        return [int(s) for s in spec.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad seed list {spec!r}") from exc


def cmd_compare(args, out) -> int:
    sc = _scenario(args)
    prop = _estimator(args, "proposed")
    std = _estimator(args, "standard", N=prop.cfg.N)
    seeds = _parse_seeds(args.seeds)
    if not seeds:
        raise UsageError("no seeds given")
    summary = sim.compare(sc, [prop, std], args.steps, seeds, workers=args.workers)
    _write(args.out or "summary.csv", summary.to_csv())
    for name in summary.median_err:
        print(f"{name}: median tail error {summary.median_err[name]:.6e}, "
              f"median tail state {summary.median_state[name]:.6e}", file=out)
    return EXIT_OK


def cmd_iqc_check(args, out) -> int:
    _need(args, "cert")
    cert = certio.load(args.cert)
    sc = _scenario(args)
    rep = iqc.check_pointwise_iqc_empirical(cert.multiplier, sc.uncertainty, args.samples, args.length, args.seed)
    print(f"min IQC value {rep.min_value:.6e} over {rep.steps} steps", file=out)
    return EXIT_OK


def _write(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


COMMANDS = {
    "verify": cmd_verify,
    "horizon": cmd_horizon,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "iqc-check": cmd_iqc_check,
}


def main(argv: Optional[Sequence[str]] = None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    try:
        args = build_parser().parse_args(argv)
        if args.cmd is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        args = _merge(args)
        return COMMANDS[args.cmd](args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE
    except (detect.Infeasible, sdp.Infeasible) as exc:
        print(f"infeasible: {exc}", file=err)
        return EXIT_INFEASIBLE
    except (mhe.SolverFailure, mhe.InfeasibleWindow, sim.SimulationAborted, sdp.NumericalFailure) as exc:
        print(f"solver failure: {exc}", file=err)
        return EXIT_SOLVER
    except (certio.CertificateFormatError, detect.InvalidCertificate, OSError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Exit codes: 0 success, 2 validation error (bad inputs, falsified certificate,
hash mismatch), 3 safety violation detected in a shielded simulation (should
never happen; treated as a test failure).
"""
from __future__ import annotations

import argparse
import json
import sys as _sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .certify import BarrierCertificate, CertifyError, check_bac, load_certificate, save_certificate
from .expr import ModelSyntaxError, RecastError
from .harness import (
    ExperimentSpec,
    HarnessError,
    controller_from_dict,
    falsify_controller,
    run_experiment,
)
from .model import BUILTIN_NAMES, DynSystem, ModelError, builtin, default_bac, load
from .poly import PolynomialError
from .runtime import ControllerRef, RuntimeError_, serve, simulate_run
from .switchgen import DeriveError, derive_artifact, load_artifact, save_artifact

VALIDATION_ERRORS = (
    ModelSyntaxError,
    RecastError,
    ModelError,
    CertifyError,
    DeriveError,
    HarnessError,
    PolynomialError,
    RuntimeError_,
    FileNotFoundError,
    ValueError,
)


def _parse_params(pairs: list[str]) -> dict[str, float]:
    out = {}
    for pair in pairs or []:
        name, _, value = pair.partition("=")
        if not value:
            raise ModelError(f"--param expects name=value, got {pair!r}")
        out[name.strip()] = float(value)
    return out


def _load_model(args) -> DynSystem:
    params = _parse_params(getattr(args, "param", None))
    if args.model in BUILTIN_NAMES:
        return builtin(args.model, params)
    return load(args.model, params)


def _load_bac(args, sys: DynSystem) -> BarrierCertificate:
    if getattr(args, "bac", None) in (None, "default"):
        return default_bac(sys)
    return load_certificate(args.bac)


def _controller(spec: str, sys: DynSystem) -> ControllerRef:
    """Parse controller specs like 'baseline', 'constant:0.035', 'affine:{...json...}'."""
    kind, _, rest = spec.partition(":")
    if kind in ("baseline", "baseline-droop"):
        return ControllerRef.baseline()
    if kind in ("constant", "constant-action"):
        return ControllerRef.constant([float(v) for v in rest.split(",")])
    if kind in ("affine", "affine-policy"):
        payload = json.loads(rest)
        return ControllerRef.affine(payload["gain"], payload["offset"])
    raise ModelError(f"unknown controller spec {spec!r}")


def _parse_x0(args, sys: DynSystem):
    if getattr(args, "x0", None):
        values = {}
        for pair in args.x0.split(","):
            name, _, value = pair.partition("=")
            values[name.strip()] = float(value)
        return sys.complete_initial(values)
    rng = np.random.default_rng(args.seed)
    return sys.sample_initial(rng, 1)[0]


def cmd_derive(args) -> int:
    sys = _load_model(args)
    bac = _load_bac(args, sys)
    art = derive_artifact(
        sys, bac, n=args.order, m=args.m, strategy=args.strategy,
        depth=args.depth, force=args.force,
    )
    save_artifact(art, args.out)
    print(f"artifact written to {args.out}")
    print(f"  n={art.n} eta={art.eta} m={art.m} strategy={art.strategy}")
    print(f"  lambda_global={art.lambda_global:.6g}")
    print(f"  mu_dec={tuple(round(v, 9) for v in art.mu_dec_global)}")
    print(f"  mu_inc={tuple(round(v, 9) for v in art.mu_inc_global)}")
    return 0


def cmd_check(args) -> int:
    sys = _load_model(args)
    bac = _load_bac(args, sys)
    report = check_bac(sys, bac, budget=args.budget, depth=args.depth)
    print(report.summary())
    return 0 if report.certified else 2


def cmd_simulate(args) -> int:
    sys = _load_model(args)
    art = load_artifact(args.artifact) if args.artifact else derive_artifact(sys, _load_bac(args, sys))
    if art.model_hash != sys.model_hash():
        raise HarnessError("artifact/model hash mismatch")
    ac = _controller(args.ac, sys)
    bc = _controller(args.bc, sys) if args.bc else ControllerRef.baseline()
    x0 = _parse_x0(args, sys)
    shield = args.shield != "off"
    rec = simulate_run(sys, art, ac, bc, x0=x0, horizon=args.horizon,
                       shield=shield, substeps=args.substeps)
    if args.out:
        Path(args.out).write_text(rec.to_csv())
        print(f"trace written to {args.out}")
    print(f"periods: {len(rec.rows)}  events: {len(rec.events)}  violated: {rec.violated}")
    for t, kind, detail in rec.events[:20]:
        print(f"  t={t:.4f}  {kind}  {detail}")
    if rec.violated and shield:
        print("SAFETY VIOLATION UNDER SHIELD -- this indicates a broken artifact")
        return 3
    return 0


def cmd_experiment(args) -> int:
    spec = ExperimentSpec.from_json(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    summary, _ = run_experiment(spec, out_dir=args.out)
    print(summary.summary())
    if spec.shield and summary.violations_shielded:
        return 3
    return 0


def cmd_falsify(args) -> int:
    sys = _load_model(args)
    ac = _controller(args.ac, sys)
    res = falsify_controller(sys, ac, budget=args.budget, seed=args.seed, horizon=args.horizon)
    if res.found:
        print(f"witness found after {res.simulations} simulations:")
        print(f"  x0 = {dict(zip(sys.init.names, res.witness))}")
        print(f"  violation at t = {res.violation_time:.6g} s")
    else:
        print(f"NONE: no violating initial state found in {res.simulations} simulations "
              f"(best margin {res.best_margin:.6g})")
    return 0


def cmd_serve(args) -> int:
    sys = _load_model(args)
    art = load_artifact(args.artifact) if args.artifact else derive_artifact(sys, _load_bac(args, sys))
    if art.model_hash != sys.model_hash():
        raise HarnessError("artifact/model hash mismatch")
    host, _, port = args.listen.partition(":")
    x0 = _parse_x0(args, sys)

    def announce(p):
        print(f"listening on {host or '127.0.0.1'}:{p}", flush=True)

    rec = serve(
        sys, art, host=host or "127.0.0.1", port=int(port or 0), x0=x0,
        horizon=args.horizon, substeps=args.substeps, deadline=args.deadline,
        on_listen=announce,
    )
    if args.out:
        Path(args.out).write_text(rec.to_csv())
    print(f"session complete: periods={len(rec.rows)} events={len(rec.events)} violated={rec.violated}")
    for t, kind, detail in rec.events[:20]:
        print(f"  t={t:.4f}  {kind}  {detail}")
    if rec.aborted:
        print(f"aborted: {rec.aborted}")
        return 2
    return 3 if rec.violated else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="barsim",
        description="Barrier-certificate switching conditions and Simplex runtime assurance",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        if model:
            p.add_argument("--model", required=True, help=f"builtin {BUILTIN_NAMES} or a model file path")
            p.add_argument("--param", action="append", metavar="NAME=VALUE", help="parameter override")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("derive", help="derive a switching artifact from a model and a certificate")
    common(p)
    p.add_argument("--bac", default="default", help="certificate JSON file, or 'default'")
    p.add_argument("--order", type=int, default=4, help="Taylor order n")
    p.add_argument("--m", type=int, default=3, help="reverse-switch multiplier")
    p.add_argument("--strategy", choices=("per-action", "global"), default="global")
    p.add_argument("--depth", type=int, default=6, help="interval bisection depth")
    p.add_argument("--force", action="store_true", help="derive even if the certificate fails validation")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_derive)

    p = sub.add_parser("check", help="validate a barrier certificate numerically")
    common(p)
    p.add_argument("--bac", default="default")
    p.add_argument("--budget", type=int, default=100000)
    p.add_argument("--depth", type=int, default=6)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("simulate", help="run one Simplex simulation")
    common(p)
    p.add_argument("--artifact", help="artifact JSON (derived in-process when omitted)")
    p.add_argument("--bac", default="default")
    p.add_argument("--ac", required=True, help="advanced controller: constant:V[,V..] | affine:JSON | baseline")
    p.add_argument("--bc", help="baseline controller override (default: model baseline)")
    p.add_argument("--x0", help="initial state as name=value,... (default: sampled)")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--shield", choices=("on", "off"), default="on")
    p.add_argument("--substeps", type=int, default=8)
    p.add_argument("--out", help="CSV trace path")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("experiment", help="run a batch experiment from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", help="output directory for CSVs and summary")
    p.add_argument("--seed", type=int, default=None, help="override the seed from the experiment file")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("falsify", help="search for an unshielded safety violation")
    common(p)
    p.add_argument("--ac", required=True)
    p.add_argument("--budget", type=int, default=1000)
    p.add_argument("--horizon", type=float, default=10.0)
    p.set_defaults(fn=cmd_falsify)

    p = sub.add_parser("serve", help="run the loop against an external controller over TCP")
    common(p)
    p.add_argument("--artifact")
    p.add_argument("--bac", default="default")
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port (port 0 = ephemeral)")
    p.add_argument("--x0")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--substeps", type=int, default=8)
    p.add_argument("--deadline", type=float, default=None, help="response deadline in seconds (default 0.9*eta)")
    p.add_argument("--out", help="CSV trace path")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=_sys.stderr)
        return 2


if __name__ == "__main__":
    _sys.exit(main())

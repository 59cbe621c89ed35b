#!/usr/bin/env python3
"""
iqcreach - robust backward reachability toolkit
Main entry point for command line execution

Usage:
    python main.py certify --config configs/gtm_sector_T2.json --out-dir runs
    python main.py validate --config configs/gtm_sector_T2.json --certificate runs/gtm_sector_T2_certificate.json
    python main.py compare --config configs/gtm_delta_hard.json --config configs/gtm_delta_soft.json
    python main.py volume --config configs/scalar.json --certificate runs/scalar_certificate.json
    python main.py simulate --config configs/scalar.json --certificate runs/scalar_certificate.json --x0 0.5
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from iqcreach.constants import EXIT_AUDIT, EXIT_CONFIG, EXIT_INFEASIBLE_INIT, EXIT_OK, EXIT_SOLVER
from iqcreach.errors import (ConfigError, ConvergenceError, InfeasibleInitialization, KypScreenError, OracleError,
                             PolynomialParseError, SolverFailure)
from iqcreach.formatters import format_gamma, format_wall_time, history_frame
from iqcreach.pipeline import ReachabilityPipeline, compare

logger = logging.getLogger("iqcreach")


def build_parser():
    parser = argparse.ArgumentParser(prog="iqcreach", description="Robust backward reachability with IQCs")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, certificate=False, configs=1):
        p.add_argument("--config", action="append", required=True,
                       help="problem config (JSON)" + (", given twice: hard then soft" if configs == 2 else ""))
        if certificate:
            p.add_argument("--certificate", required=True, help="certificate file written by certify")
        p.add_argument("--out-dir", default=None, help="directory for certificates, CSV and JSON reports")
        p.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--tol", type=float, default=None, help="gamma convergence and bisection tolerance")

    certify = sub.add_parser("certify", help="synthesize a certificate")
    common(certify)
    certify.add_argument("--dump-sdp", default=None, metavar="DIR",
                         help="write every solved SDP as sparse text into DIR")
    common(sub.add_parser("validate", help="audit and falsify a certificate"), certificate=True)
    common(sub.add_parser("compare", help="hard versus soft IQC volumes"), configs=2)
    volume = sub.add_parser("volume", help="Monte-Carlo volume of a certified set")
    common(volume, certificate=True)
    volume.add_argument("--samples", type=int, default=None, help="number of uniform draws")
    simulate = sub.add_parser("simulate", help="one closed-loop run from x0")
    common(simulate, certificate=True)
    simulate.add_argument("--x0", type=float, nargs="+", required=True, help="initial plant state")
    simulate.add_argument("--perturbation", type=int, default=0, help="index of the perturbation sample")
    simulate.add_argument("--disturbance", type=int, default=0, help="index of the disturbance sample")
    return parser


def _pipeline(args, path=None):
    return ReachabilityPipeline.from_path(path or args.config[0], out_dir=args.out_dir, seed=args.seed,
                                          tol=args.tol, jobs=args.jobs, dump_dir=getattr(args, "dump_sdp", None))


def cmd_certify(args):
    pipeline = _pipeline(args)
    print(f"🔍 Certifying '{pipeline.name}'...")
    result = pipeline.certify()
    print(history_frame(result.certificate, result.timings).to_string(index=False))
    summary = result.summary()
    print("=" * 60)
    print(f"   gamma:     {format_gamma(summary['gamma'])}")
    print(f"   verified:  {summary['verified']}")
    print(f"   wall time: {format_wall_time(summary['wall_time'])}")
    for kind, path in result.files.items():
        print(f"   {kind}: {path}")
    print("=" * 60)
    return EXIT_OK


def cmd_validate(args):
    pipeline = _pipeline(args)
    certificate = pipeline.load_certificate(args.certificate)
    print(f"🔍 Validating '{args.certificate}' against '{pipeline.name}'...")
    result = pipeline.validate(certificate)
    print(json.dumps(result.report, indent=2, default=str))
    if not result.passed:
        if result.report.get("untested"):
            print("⚠️ No closed loop was simulated; the falsification budget or sampled slice is empty")
        print("❌ Validation failed")
        return EXIT_AUDIT
    print("✅ All checks passed")
    return EXIT_OK


def cmd_compare(args):
    if len(args.config) != 2:
        raise ConfigError("compare needs exactly two --config arguments (hard, then soft)")
    frame, report = compare(args.config[0], args.config[1], out_dir=args.out_dir, seed=args.seed,
                            tol=args.tol, jobs=args.jobs)
    print(frame.to_string(index=False))
    print(f"Soft >= hard - 3 stderr: {report['ordered']}")
    return EXIT_OK


def cmd_volume(args):
    pipeline = _pipeline(args)
    estimate = pipeline.volume(pipeline.load_certificate(args.certificate), args.samples)
    if estimate.empty:
        print(f"Volume below {estimate.upper_bound:.4g} (no hits in {estimate.draws} draws)")
    else:
        print(f"Volume {estimate.estimate:.6g} +/- {estimate.stderr:.3g} ({estimate.hits}/{estimate.draws} hits)")
    return EXIT_OK


def cmd_simulate(args):
    pipeline = _pipeline(args)
    certificate = pipeline.load_certificate(args.certificate)
    if len(args.x0) != len(certificate.plant_states):
        raise ConfigError(f"--x0 needs {len(certificate.plant_states)} values")
    trajectory, frame = pipeline.simulate(certificate, args.x0, args.perturbation, args.disturbance)
    print(frame.tail(1).to_string(index=False))
    return EXIT_OK


COMMANDS = {
    "certify": cmd_certify,
    "validate": cmd_validate,
    "compare": cmd_compare,
    "volume": cmd_volume,
    "simulate": cmd_simulate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PolynomialParseError) as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleInitialization as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_INFEASIBLE_INIT
    except OracleError as e:
        print(f"❌ Grid oracle error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KypScreenError as e:
        print(f"❌ Soft IQC precondition failed: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, ConvergenceError) as e:
        family = f" (constraint family '{e.family}')" if getattr(e, "family", None) else ""
        print(f"❌ Solver failure{family}: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 2 invalid manifest, 3 I/O failure, 4 solver
non-convergence on a single-point run.
"""

import argparse
import logging
import sys
from dataclasses import replace

from .errors import ContractError, ConvergenceError
from .experiment import (
    OPTIMIZER_DEFAULTS,
    ManifestError,
    compare_active_passive,
    emit_csv,
    load_manifest,
    run_manifest,
    write_run_ledger,
    write_rows,
)

log = logging.getLogger("activeirs")

EXIT_OK = 0
EXIT_MANIFEST = 2
EXIT_IO = 3
EXIT_CONVERGENCE = 4

DEFAULT_TRIALS = 5000


def build_parser():
    parser = argparse.ArgumentParser(
        prog="activeirs",
        description="Ergodic-rate approximation, Monte-Carlo validation and "
                    "optimization for active-IRS MIMO links.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "da": "deterministic rate at Q = P_T I and uniform reflection amplitude",
        "mc": "deterministic rate and its Monte-Carlo reference",
        "optimize": "alternating optimization of Q and the reflection coefficients",
        "sweep": "run the manifest as written",
        "compare": "optimized active surface against the passive one",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--manifest", required=True, help="experiment manifest (JSON)")
        p.add_argument("--seed", type=int, default=None,
                       help="Monte-Carlo / restart seed, overrides the manifest")
        p.add_argument("--out", default=None,
                       help="output CSV; defaults to the manifest's output or stdout")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.add_argument("--log-level", default="WARNING",
                       choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        if name == "optimize":
            p.add_argument("--trace", default=None,
                           help="write the iteration trace of the first point to this CSV")
    return parser


def _adapt(m, command):
    """Restrict a manifest to what a subcommand computes."""
    if command == "da":
        return replace(m, mc_trials=None, optimizer=None)
    if command == "mc":
        return replace(m, optimizer=None, mc_trials=m.mc_trials or DEFAULT_TRIALS)
    if command in ("optimize", "compare"):
        return replace(m, optimizer=m.optimizer or dict(OPTIMIZER_DEFAULTS))
    return m


def _write(rows, out):
    if out is None:
        write_rows(rows, sys.stdout)
    else:
        emit_csv(rows, out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        m = load_manifest(args.manifest)
    except ManifestError as exc:
        print(f"activeirs: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    except OSError as exc:
        print(f"activeirs: cannot read manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.seed is not None:
        m = m.with_seed(args.seed)
    m = _adapt(m, args.command)
    single = m.sweep is None
    try:
        if args.command == "compare":
            rows = compare_active_passive(m, threads=args.threads)
        else:
            rows = run_manifest(m, threads=args.threads, strict=single)
    except ConvergenceError as exc:
        print(f"activeirs: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except ContractError as exc:
        print(f"activeirs: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    out = args.out or m.output
    try:
        _write(rows, out)
        if out is not None:
            command = " ".join(["activeirs", *(sys.argv[1:] if argv is None else argv)])
            write_run_ledger(out + ".ledger.txt", m, rows, command)
        if getattr(args, "trace", None) and rows[0].trace is not None:
            rows[0].trace.to_csv(args.trace)
    except OSError as exc:
        print(f"activeirs: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    failed = [r for r in rows if r.status != "ok"]
    for r in failed:
        log.warning("point %r: %s", r.sweep_value, r.status)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

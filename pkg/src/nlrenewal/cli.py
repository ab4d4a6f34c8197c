"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O
failure. Acceptance flags that come out false do not change the exit code;
they are part of the written output.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .errors import ConfigError, NumericsError
from .parallel import THREADS_ENV

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICS, EXIT_IO = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="TOML experiment file")
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")
    p.add_argument("--format", choices=("csv", "json"), default=None)
    p.add_argument("--seed", type=int, default=None, help="override master_seed")
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--exact-repro", action="store_true", help="fixed reduction order (always on; recorded)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlrenewal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the experiment described by --config")
    _common(p)

    p = sub.add_parser("sprt", help="per-run rank SPRT outcomes {rep, stop_n, boundary, overshoot}")
    _common(p)

    p = sub.add_parser("diagnose", help="regularity diagnostics as a JSON array")
    _common(p)

    p = sub.add_parser("constants", help="mu, h integral, limiting perturbation mean and C(eta) as JSON")
    _common(p, config_required=False)
    p.add_argument("--Delta", type=float, default=None)
    p.add_argument("--A", type=float, default=None)
    p.add_argument("--eta", type=float, default=None, help="defaults to (Delta-1)/(Delta+1)")
    p.add_argument("--n-max", type=int, default=3200)

    p = sub.add_parser("report", help="print the pass/fail flags of a JSON summary written by simulate")
    p.add_argument("input", help="JSON file written with --format json")
    return parser


def _load(args) -> harness.ExperimentConfig:
    return harness.ExperimentConfig.load(args.config).with_overrides(args.seed, args.exact_repro)


def _report(path: str) -> int:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, list):  # diagnostics array
        flags: dict[str, bool] = {}
        for r in data:
            flags[r["condition"]] = flags.get(r["condition"], True) and bool(r["pass"])
        name = "diagnostics"
    else:
        flags = data.get("flags", {})
        name = data.get("experiment", "?")
    for k in sorted(flags):
        print(f"{name} {k}: {'PASS' if flags[k] else 'FAIL'}")
    if not flags:
        print(f"{name}: no flags")
    return EXIT_OK


def _dispatch(args) -> int:
    if args.command == "report":
        return _report(args.input)
    if args.command == "constants":
        if args.config:
            cfg = _load(args)
            summary = harness.run(harness.ExperimentConfig.from_dict({**cfg.to_dict(), "experiment": "constants"}))
            payload = summary.meta
        else:
            if args.Delta is None or args.A is None:
                raise ConfigError("constants needs --Delta and --A (or --config)")
            payload = harness.constants_report(args.Delta, args.A, args.eta, args.n_max)
        text = json.dumps(harness.json_safe(payload), sort_keys=True, indent=2) + "\n"
        _write(args.out, text)
        return EXIT_OK
    cfg = _load(args)
    if args.command == "sprt":
        summary = harness.run_sprt_rows(cfg, args.threads)
        fmt = args.format or "csv"
    elif args.command == "diagnose":
        if cfg.experiment != "diagnostics":
            cfg = harness.ExperimentConfig.from_dict({**cfg.to_dict(), "experiment": "diagnostics"})
        summary = harness.run(cfg, args.threads)
        fmt = args.format or "json"
    else:
        summary = harness.run(cfg, args.threads)
        fmt = args.format or "csv"
    harness.emit(summary, args.out, fmt)
    return EXIT_OK


def _write(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry point: ``grapelab <subcommand> [--config FILE] [flags]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .harness import (
    KINDS,
    ConfigError,
    ExperimentConfig,
    output_path,
    parse_value,
    read_config_file,
    run_experiment,
    write_csv,
)
from .stats import DEFAULT_GROUP, aggregate, select_best_beta
from .verify import SUITES, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("grapelab")

# flag -> config key
FLAGS = {
    "--env": "env", "--algo": "algo", "--start-state": "start_state",
    "--alpha": "alpha", "--lambda": "lambda", "--eta": "eta", "--beta": "beta", "--sigma": "sigma", "--N": "N",
    "--gamma": "gamma", "--slip": "slip", "--delta": "delta",
    "--iters": "iters", "--K": "K", "--k": "k", "--samples": "samples",
    "--blocks": "blocks", "--block-size": "block_size", "--steps": "steps",
    "--policy-period": "policy_period", "--buffer-capacity": "buffer_capacity",
    "--trials": "trials", "--seed": "seed", "--workers": "workers", "--out": "out",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grapelab", description="Tabular GRAPE and Retrace experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", help="INI file; flags override its values")
        for flag, key in FLAGS.items():
            p.add_argument(flag, dest=key.replace("lambda", "lam"), metavar=key.upper(),
                           help="comma-separated list" if key in ("alpha", "lambda", "eta", "beta", "sigma", "N") else None)
    v = sub.add_parser("verify")
    v.add_argument("--suite", required=True, choices=tuple(SUITES))
    v.add_argument("--seed", type=int, default=0)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    kind = values.pop("kind", args.command)
    if kind != args.command:
        raise ConfigError("kind", f"config file is for {kind!r}, not {args.command!r}")
    for key in FLAGS.values():
        attr = key.replace("lambda", "lam")
        raw = getattr(args, attr, None)
        if raw is not None:
            values[attr] = parse_value(key, raw)
    return ExperimentConfig.for_kind(kind, **values)


def _write_summary(rows, path: Path) -> None:
    summary = sorted(aggregate(rows), key=lambda s: (tuple("" if v is None else str(v) for v in s.group), s.step))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*(k if k != "lam" else "lambda" for k in DEFAULT_GROUP),
                    "step", "n", "mean", "stderr", "median", "p2.5", "p97.5"])
        for s in summary:
            w.writerow([*("" if v is None else ("%.17g" % v if isinstance(v, float) else v) for v in s.group),
                        s.step, s.n, *("%.17g" % x for x in (s.mean, s.stderr, s.median, s.p025, s.p975))])


def _write_best_beta(rows, cfg: ExperimentConfig, path: Path) -> None:
    best = select_best_beta(rows, cfg.beta)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "eta", "lambda", "N", "beta"])
        for (alpha, eta, lam, n), beta in sorted(best.items(), key=lambda kv: str(kv[0])):
            w.writerow(["" if alpha is None else "%.17g" % alpha, "" if eta is None else "%.17g" % eta,
                        "%.17g" % lam, n, "%.17g" % beta])


def run_command(args: argparse.Namespace) -> int:
    if args.command == "verify":
        results = run_suite(args.suite, args.seed)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
        return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY
    cfg = config_from_args(args)
    rows = run_experiment(cfg)
    path = output_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, path)
    _write_summary(rows, path.with_name(f"{cfg.kind}_summary.csv"))
    if cfg.kind == "frozenlake-control":
        _write_best_beta(rows, cfg, path.with_name("best_beta.csv"))
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_command(args)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface any failure as a runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

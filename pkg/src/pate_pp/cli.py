"""Command line entry point: ``pate-pp run | sweep-sigma | sweep-param | audit-privacy``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from .accountant import LedgerFormatError, RdpLedger
from .config import ConfigError, load_config, parse_config
from .experiment import PARAM_HEADER, SIGMA_HEADER, audit_privacy, run_experiment, sweep_param, sweep_sigma

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("pate_pp")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _load(args):
    cfg, raw = load_config(args.config)
    if args.seed is not None:
        raw = dict(raw, seed=args.seed)
        cfg = parse_config(raw)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, raw, out


def _fmt(x):
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])


def cmd_run(args) -> int:
    cfg, raw, out = _load(args)
    report = run_experiment(cfg, config_echo=raw, ledger_path=out / "ledger.json")
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    acc = report["student"]["final_accuracy"]["max"]
    print(f"mode={cfg.mode} epsilon={report['privacy']['epsilon']} accuracy={acc} -> {out / 'report.json'}")
    return EXIT_OK


def cmd_sweep_sigma(args) -> int:
    cfg, _, out = _load(args)
    if args.values is None or len(args.values) < 2:
        raise ConfigError("--values: sweep-sigma needs at least two sigma values")
    rows = sweep_sigma(cfg, args.values)
    _write_csv(out / "curves.csv", SIGMA_HEADER, rows)
    print(f"wrote {len(rows)} rows to {out / 'curves.csv'}")
    return EXIT_OK


def cmd_sweep_param(args) -> int:
    cfg, _, out = _load(args)
    if not args.values:
        raise ConfigError("--values: sweep-param needs at least one value")
    rows = sweep_param(cfg, args.param, args.values)
    _write_csv(out / "table.csv", PARAM_HEADER, rows)
    print(f"wrote {len(rows)} rows to {out / 'table.csv'}")
    return EXIT_OK


def cmd_audit_privacy(args) -> int:
    try:
        ledger = RdpLedger.load(args.ledger)
    except FileNotFoundError:
        raise ConfigError(f"{args.ledger}: no such file") from None
    deltas = args.values or [1e-5]
    if any(not 0 < d < 1 for d in deltas):
        raise ConfigError("--values: every delta must lie in (0, 1)")
    rows = audit_privacy(ledger, deltas)
    header = ("delta", "epsilon", "order")
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row[h]) for h in header])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "audit.csv", header, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pate-pp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, values_help=None):
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.add_argument("--seed", type=int, help="override the config master seed")
        if values_help:
            sp.add_argument("--values", type=_float_list, help=values_help)

    common(sub.add_parser("run", help="run one experiment, write report.json and ledger.json"))
    common(sub.add_parser("sweep-sigma", help="sweep the answer noise scale, write curves.csv"),
           "comma-separated sigma values")
    sp = sub.add_parser("sweep-param", help="sweep beta or tau, write table.csv")
    common(sp, "comma-separated parameter values")
    sp.add_argument("--param", required=True, choices=("beta", "tau"))
    sp = sub.add_parser("audit-privacy", help="convert a saved ledger to (epsilon, delta) per delta")
    sp.add_argument("--ledger", required=True, help="ledger.json from a run")
    sp.add_argument("--values", type=_float_list, help="comma-separated delta values")
    sp.add_argument("--out", help="also write audit.csv into this directory")
    return p


COMMANDS = {
    "run": cmd_run,
    "sweep-sigma": cmd_sweep_sigma,
    "sweep-param": cmd_sweep_param,
    "audit-privacy": cmd_audit_privacy,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, LedgerFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("run failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

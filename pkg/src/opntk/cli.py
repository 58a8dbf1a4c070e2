"""Command-line front end.

    lab_cli kernel      infinite-width Gram matrices and their smallest eigenvalues
    lab_cli train       supervised gradient descent, one trace per (m, seed)
    lab_cli pinn-train  physics-informed gradient descent
    lab_cli sweep-m     width sweep with fitted scaling slopes
    lab_cli report      print and re-validate a run's summary.json
    lab_cli selftest    the acceptance checks

Exit codes: 0 success, 1 configuration error, 2 numerical failure or
divergence, 3 failed acceptance check.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema

from . import acceptance, lab
from .trainer import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 1, 2, 3

MODE_FOR = {"kernel": "kernel-only", "train": "supervised", "pinn-train": "pinn"}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", metavar="N[,N...]", help="seed or comma-separated seeds")
    p.add_argument("--m", metavar="N[,N...]", help="width or comma-separated widths")
    p.add_argument("--eta", metavar="X|auto", help="learning rate")
    p.add_argument("--steps", metavar="N")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--mc-samples", metavar="N")
    p.add_argument("--cadence", metavar="N", help="Gram diagnostics every N steps")
    p.add_argument("--workers", metavar="N", help="parallel sweep cells")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="any other config key, repeatable")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lab_cli", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("kernel", "infinite-width Gram matrices"),
                        ("train", "supervised training"),
                        ("pinn-train", "physics-informed training"),
                        ("sweep-m", "width sweep with scaling fits")):
        _common(sub.add_parser(name, help=help_))
    rp = sub.add_parser("report", help="summarize a finished run")
    rp.add_argument("--out", metavar="DIR", default="runs")
    st = sub.add_parser("selftest", help="run the acceptance checks")
    st.add_argument("--only", metavar="N[,N...]", help="criterion numbers to run")
    return ap


def _overrides(args) -> dict:
    vals = {}
    for flag, key in (("seed", "seeds"), ("m", "m"), ("eta", "eta"), ("steps", "steps"),
                      ("out", "out"), ("mc_samples", "mc_samples"), ("cadence", "cadence"),
                      ("workers", "workers")):
        v = getattr(args, flag, None)
        if v is not None:
            vals[key] = v
    for item in args.set:
        if "=" not in item:
            raise lab.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        vals[k.strip()] = v.strip()
    return vals


def _run(args) -> int:
    base = {}
    if args.command in MODE_FOR:
        base["mode"] = MODE_FOR[args.command]
    else:
        base["m"] = ",".join(map(str, lab.DEFAULT_SWEEP_M))
        base["seeds"] = ",".join(map(str, lab.DEFAULT_SWEEP_SEEDS))
    cfg = lab.load_config(args.config, _overrides(args), base)
    if args.command in MODE_FOR and cfg.mode != MODE_FOR[args.command]:
        raise lab.ConfigError(f"{args.command} runs mode {MODE_FOR[args.command]}, "
                              f"config asks for {cfg.mode}")
    summary = lab.run(cfg, progress=lambda m, s: print(f"done m={m} seed={s}",
                                                       file=sys.stderr, flush=True))
    print(lab.format_report(summary))
    print(f"wrote {Path(cfg.out) / 'summary.json'}")
    return EXIT_OK


def _report(args) -> int:
    path = Path(args.out) / "summary.json"
    try:
        summary = json.loads(path.read_text())
        lab.validate_summary(summary)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise lab.ConfigError(f"cannot use {path}: {exc}") from None
    print(lab.format_report(summary))
    return EXIT_OK


def _selftest(args) -> int:
    only = None
    if args.only:
        try:
            only = {int(x) for x in args.only.split(",")}
        except ValueError:
            raise lab.ConfigError(f"--only expects criterion numbers, got {args.only!r}") from None
        known = {c[0] for c in acceptance.CRITERIA}
        if not only <= known:
            raise lab.ConfigError(f"unknown criteria {sorted(only - known)}")
    results = acceptance.run_all(only, echo=lambda line: print(line, flush=True))
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return _report(args)
        if args.command == "selftest":
            return _selftest(args)
        return _run(args)
    except lab.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

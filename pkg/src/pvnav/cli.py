"""Command line entry point: ``run``, ``simulate`` and ``report``.

Exit codes: 0 success, 2 configuration error, 3 initialization failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import (ConfigError, InitializationError, load_config, load_report, run_replay,
                       simulation_from_dict, summarize, time_stages, write_report, write_simulation)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INIT = 3


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.output
    if out is None:
        raise ConfigError("no output directory (config 'output' or --out)")
    report = run_replay(cfg)
    write_report(report, out)
    agg = report.aggregates
    print(f"frames {agg['n_frames']}  valid PnP {agg['valid_pnp_pct']:.1f}%  "
          f"anchor {agg['anchor']}  report {out}")
    if agg.get("mean_err_kf") is not None:
        print(f"mean position error: filter {agg['mean_err_kf']:.3f} m, "
              f"PnP {agg['mean_err_pnp']:.3f} m, GNSS {agg['mean_err_gnss']:.3f} m")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    try:
        data = json.loads(Path(args.spec).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read spec: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"spec is not valid JSON: {exc}") from exc
    out = write_simulation(simulation_from_dict(data), args.out)
    print(f"flight log written to {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        report = load_report(args.input)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    stats = summarize(report)
    print(f"{'metric':<12} {'min':>9} {'q1':>9} {'median':>9} {'q3':>9} {'max':>9}")
    for key, s in stats.items():
        print(f"{key:<12} " + " ".join(f"{s[k]:9.4f}" for k in ("min", "q1", "median", "q3", "max")))
    stages = time_stages(report)
    if stages:
        print("mean stage time [ms]: " + ", ".join(f"{k} {v:.1f}" for k, v in stages.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvnav", description="Model-based drone localization over PV plants")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="replay a flight and write a report")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides the config)")
    r.set_defaults(func=_cmd_run)
    s = sub.add_parser("simulate", help="synthesise a flight log")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_simulate)
    rep = sub.add_parser("report", help="print statistics of a report directory")
    rep.add_argument("--in", dest="input", required=True)
    rep.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InitializationError as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return EXIT_INIT


if __name__ == "__main__":
    sys.exit(main())

"""``frs`` command line: scenario runs, gain certificate and tube benchmark."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import MODES, ScenarioConfig, load_config
from .errors import ConfigError, NumericalFault
from .export import _clean, export_scenario1, export_scenario2, write_json
from .scenarios import bench, check_gains, modes_for, run_scenario1, run_scenario2

EXIT_OK, EXIT_CONFIG, EXIT_UNSOUND, EXIT_NUMERICAL = 0, 2, 3, 4

logger = logging.getLogger("multirotor_frs")


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    return cfg


def _print(payload: dict) -> None:
    print(json.dumps(_clean(json.loads(json.dumps(payload, default=str))), indent=2, sort_keys=True))


def cmd_scenario1(args) -> int:
    cfg = _config(args)
    if args.samples is not None:
        if args.samples < 1:
            raise ConfigError("--samples must be at least 1")
        cfg.n_samples = args.samples
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode is not None:
        cfg.mode = args.mode
    cfg.validate()
    result = run_scenario1(cfg)
    export_scenario1(result, Path(args.out))
    metrics = result.metrics()
    for mode, m in metrics["modes"].items():
        print(f"{mode:15s} violations={m['violations']:6d}/{m['checks']:d}  max_margin={m['max_state_margin']:.4f}"
              f"  trace_inv_end={m['trace_inv_end']:.4g}  logdet_inv_end={m['logdet_inv_end']:.4g}"
              f"  wall={m['tube_wall_ms']:.1f}ms")
    for mode, o in metrics["ordering"].items():
        print(f"{mode:15s} below baseline: trace={o['trace_below_all']} det={o['det_below_all']}"
              f"  det ratio at end={o['det_ratio_end']:.4g}")
    print(f"artifacts written to {args.out}")
    return EXIT_OK if result.sound else EXIT_UNSOUND


def cmd_scenario2(args) -> int:
    cfg = _config(args)
    result = run_scenario2(cfg)
    export_scenario2(result, Path(args.out))
    for mode, m in result.metrics()["modes"].items():
        print(f"{mode:15s} tubes={m['tubes']} violations={m['violations']}  mean wall={m['mean_tube_wall_ms']:.1f}ms")
    print(f"artifacts written to {args.out}")
    return EXIT_OK if result.sound else EXIT_UNSOUND


def cmd_check_gains(args) -> int:
    cfg = _config(args)
    report = check_gains(cfg)
    if args.out:
        write_json(Path(args.out), report)
    _print(report)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    if args.iters < 20:
        logger.warning("fewer than 20 iterations; medians may be noisy")
    _print(bench(cfg, args.iters, modes_for(args.mode or cfg.mode)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frs", description="Ellipsoidal reachable-set tubes for a disturbance-observing multirotor.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s1 = sub.add_parser("scenario1", help="tubes per mode checked against seeded rollouts")
    s1.add_argument("--config", required=True)
    s1.add_argument("--out", required=True)
    s1.add_argument("--samples", type=int)
    s1.add_argument("--seed", type=int)
    s1.add_argument("--mode", choices=MODES)
    s1.set_defaults(func=cmd_scenario1)

    s2 = sub.add_parser("scenario2", help="replanned tubes along one flight per controller")
    s2.add_argument("--config", required=True)
    s2.add_argument("--out", required=True)
    s2.set_defaults(func=cmd_scenario2)

    cg = sub.add_parser("check-gains", help="gain hypotheses, ultimate-bound radii and audits")
    cg.add_argument("--config", required=True)
    cg.add_argument("--out", help="also write the report to this JSON file")
    cg.set_defaults(func=cmd_check_gains)

    b = sub.add_parser("bench", help="median wall time of one full-horizon tube")
    b.add_argument("--config", required=True)
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--mode", choices=MODES)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

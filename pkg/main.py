"""
Command-line entry point for the Artificial Culture Lab simulator.

Usage:
    python main.py run configs/copybots.toml --seed 7 --out runs/copybots
    python main.py analyze runs/copybots --report lineage
    python main.py replay runs/storybots --robot 0 --cycle 12
    python main.py calibrate configs/copybots.toml --out calibration.json
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from config import LOG_LEVEL_ENV, ConfigError, apply_calibration, default_out_root, load_config
from figures import MissingTraceError, replay_imagination, rl_curves_figure, rl_episode_frame
from lineage_analysis import write_reports
from scenarios import calibrate, run_scenario
from telemetry import (
    EVENTS_FILE,
    CorruptLogError,
    EventLog,
    read_events,
    read_manifest,
    to_jsonable,
    write_manifest,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CORRUPT_LOG = 2

REPORTS = ("lineage", "clusters", "retell", "memory-study")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="culture-lab", description="Copybots and Storybots simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a scenario and write its event log")
    run.add_argument("config", type=Path)
    run.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    run.add_argument("--out", type=Path, default=None, help="run directory (default: $CULTURE_LAB_OUT_DIR/<name>)")
    run.add_argument("--calibration", type=Path, default=None, help="calibration JSON written by `calibrate`")

    analyze = commands.add_parser("analyze", help="write reports for a finished run")
    analyze.add_argument("run_dir", type=Path)
    analyze.add_argument("--report", choices=REPORTS, default="lineage")
    analyze.add_argument("--tau", type=float, action="append", default=None,
                         help="similarity threshold (repeatable, default: the run config's taus)")

    replay = commands.add_parser("replay", help="render one CE cycle of a traced run")
    replay.add_argument("run_dir", type=Path)
    replay.add_argument("--robot", type=int, required=True)
    replay.add_argument("--cycle", type=int, required=True)

    calib = commands.add_parser("calibrate", help="fit the noise scale to the imitation fidelity band")
    calib.add_argument("config", type=Path)
    calib.add_argument("--out", type=Path, default=None)
    calib.add_argument("--trials", type=int, default=20)
    calib.add_argument("--pedestrian-trials", type=int, default=0)
    return parser


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.calibration is not None:
        config = apply_calibration(config, args.calibration)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    out_dir = args.out or default_out_root() / f"{args.config.stem}_seed{config.seed}"

    print(f"🚀 Running {config.scenario.kind} (seed {config.seed}) -> {out_dir}")
    with EventLog(out_dir / EVENTS_FILE) as log:
        summary = run_scenario(config, log, out_dir)
    write_manifest(out_dir, config, config.seed, {"summary": summary})
    if config.scenario.kind == "rl":
        rl_curves_figure(rl_episode_frame(read_events(out_dir)), out_dir / "figures" / "rl_curves.svg")

    print(f"✅ Run finished: {json.dumps(to_jsonable(summary), sort_keys=True)}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    # --tau wins over the thresholds the run was configured with
    taus = tuple(args.tau) if args.tau else tuple(read_manifest(args.run_dir)["config"]["scenario"]["taus"])
    written = write_reports(args.run_dir, args.report, taus)
    print(f"✅ {args.report} report written:")
    for path in written:
        print(f"   {path}")
    return EXIT_OK


def cmd_replay(args) -> int:
    events = read_events(args.run_dir)
    out_path = Path(args.run_dir) / "figures" / f"imagination_robot{args.robot}_cycle{args.cycle}.svg"
    result = replay_imagination(events, args.robot, args.cycle, out_path)
    print(f"✅ {result.predicted} predicted trajectories, selected #{result.selected_index} "
          f"({result.selected_kind}) -> {result.path}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config = load_config(args.config)
    print(f"🚀 Calibrating noise for {args.config} ({args.trials} trials per scale)")
    calibration = calibrate(config, n_trials=args.trials, pedestrian_trials=args.pedestrian_trials)
    out_path = args.out or default_out_root() / f"{args.config.stem}_calibration.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(to_jsonable(calibration), indent=2, sort_keys=True))
    marker = "✅" if calibration["in_band"] else "❌"
    print(f"{marker} noise_scale={calibration['noise_scale']} "
          f"(mean fidelity {calibration['mean_fidelity']:.3f}) -> {out_path}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "analyze": cmd_analyze, "replay": cmd_replay, "calibrate": cmd_calibrate}


def cli_main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv(LOG_LEVEL_ENV, "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; --help exits 0
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"❌ Config error: {e}")
        return EXIT_CONFIG
    except (CorruptLogError, MissingTraceError) as e:
        print(f"❌ {e}")
        return EXIT_CORRUPT_LOG


if __name__ == "__main__":
    sys.exit(cli_main())

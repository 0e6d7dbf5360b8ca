"""Command line interface: ``msfm <command>``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import coplanarity, tracking
from .bundle import write_cost_log
from .config import load_config
from .errors import (BehindCameraError, ConfigError, DegenerateWarpError, MsfmError, NumericError, StageError,
                     UnderConstrainedError)
from .export import export_model
from .io import PipelineState, dump_json, load_dataset, load_state, to_jsonable
from .metrics import evaluate
from .pipeline import build_ba_problem, run_stage
from .synth import GroundTruth, SceneConfig, write_scene

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("msfm")

# command -> pipeline stage
STAGE_OF = {
    "preprocess": "preprocess",
    "frame": "frame",
    "refine-rotations": "rotations",
    "track": "tracks",
    "coplanarity": "relations",
    "solve": "solution",
    "ba": "ba",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, (NumericError, UnderConstrainedError, BehindCameraError, DegenerateWarpError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def _log_dir(args) -> Path:
    d = Path(args.out) if getattr(args, "out", None) else Path(args.state).resolve().parent
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_stage_logs(state: PipelineState, stage: str, out: Path) -> None:
    """Per-stage CSV logs."""
    if stage == "rotations" and state.logs.get("rotations"):
        with open(out / "rotation_cost.csv", "w") as fh:
            fh.write("round,iteration,cost\n")
            for r, hist in enumerate(state.logs["rotations"]["cost_histories"]):
                for i, c in enumerate(hist):
                    fh.write(f"{r + 1},{i},{c!r}\n")
    elif stage == "tracks":
        tracking.write_tracks_csv(state.tracks, out / "tracks.csv")
    elif stage == "relations":
        coplanarity.write_relations_csv(state.relations, out / "relations.csv")
    elif stage == "solution":
        dump_json(to_jsonable(state.solution.to_record()), out / "solution.json")
        with open(out / "solution.csv", "w") as fh:
            fh.write("frame_id,registered,tx,ty,tz\n")
            sol = state.solution
            for f, reg, t in zip(sol.frame_ids, sol.registered, sol.translations):
                fh.write(f"{f},{int(reg)},{t[0]!r},{t[1]!r},{t[2]!r}\n")
    elif stage == "ba":
        write_cost_log(state.ba, out / "ba_cost.csv")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    d = {}
    if args.scene:
        d = json.loads(Path(args.scene).read_text())
    for key, val in (("seed", args.seed), ("n_frames", args.n_frames), ("n_rooms", args.n_rooms),
                     ("pixel_noise_std", args.pixel_noise), ("walk_std_deg", args.drift_deg)):
        if val is not None:
            d[key] = val
    cfg = SceneConfig.from_dict(d)
    ds, _ = write_scene(cfg, args.out)
    print(f"wrote {ds.n_frames} frames, {len(ds.segments)} segments to {args.out}")
    return EXIT_OK


def cmd_stage(args) -> int:
    cfg = load_config(args.config)
    stage = STAGE_OF[args.command]
    if stage == "preprocess":
        if not args.dataset:
            raise ConfigError("preprocess needs --dataset")
        state = PipelineState(dataset=load_dataset(args.dataset))
    else:
        state = load_state(args.state)
    if stage == "ba" and args.phase != "all":
        cfg.ba_phases = tuple(range(1, int(args.phase) + 1))
    run_stage(state, stage, cfg, args.state)
    write_stage_logs(state, stage, _log_dir(args))
    print(json.dumps(to_jsonable(state.logs.get(stage, {})), sort_keys=True))
    return EXIT_OK


def _ground_truth_path(state: PipelineState, explicit: Optional[str]) -> Path:
    if explicit:
        return Path(explicit)
    if state.dataset is not None and state.dataset.root is not None:
        return state.dataset.root / "ground_truth.json"
    raise ConfigError("no ground truth given and the dataset location is unknown")


def _report(state: PipelineState, gt_path: Path, cfg, timings: Optional[dict]) -> dict:
    gt = GroundTruth.load(gt_path)
    initial = build_ba_problem(state, cfg) if state.ba is not None else None
    return to_jsonable(evaluate(state, gt, initial, timings).to_dict())


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    state = load_state(args.state)
    tpath = Path(args.state).resolve().parent / "timings.json"
    timings = json.loads(tpath.read_text()) if tpath.exists() else None
    rep = _report(state, _ground_truth_path(state, args.ground_truth), cfg, timings)
    out = Path(args.out) if args.out else Path(args.state).resolve().parent / "report.json"
    dump_json(rep, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    state = load_state(args.state)
    out = Path(args.out) if args.out else Path(args.state).resolve().parent / f"model.{args.format}"
    export_model(state, args.format, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state_path = Path(args.state) if args.state else out / "state.msfm"
    state = PipelineState(dataset=load_dataset(args.dataset))
    timings: dict = {}
    for stage in STAGE_OF.values():
        run_stage(state, stage, cfg, state_path, timings)
        write_stage_logs(state, stage, out)
    dump_json(timings, out / "timings.json")
    export_model(state, "ply", out / "model.ply")
    export_model(state, "json", out / "model.json")
    gt_path = Path(args.dataset) / "ground_truth.json"
    if gt_path.exists():
        dump_json(_report(state, gt_path, cfg, timings), out / "report.json")
    print(json.dumps(to_jsonable({k: v for k, v in state.logs.items() if k in ("solution", "ba")}), sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--state", help="pipeline state file")
    common.add_argument("--verbose", "-v", action="store_true")

    p = _Parser(prog="msfm", description="Manhattan line-based structure from motion")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scene", help="scene config JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-frames", type=int)
    s.add_argument("--n-rooms", type=int)
    s.add_argument("--pixel-noise", type=float)
    s.add_argument("--drift-deg", type=float, help="per-frame rotation drift std (degrees)")
    s.set_defaults(func=cmd_synth)

    for name in STAGE_OF:
        s = sub.add_parser(name, parents=[common], help=f"run the {STAGE_OF[name]} stage")
        if name == "preprocess":
            s.add_argument("--dataset", required=True)
        if name == "ba":
            s.add_argument("--phase", choices=["1", "2", "3", "all"], default="all")
        s.add_argument("--out", help="directory for CSV logs (default: next to the state)")
        s.set_defaults(func=cmd_stage, needs_state=True)

    s = sub.add_parser("evaluate", parents=[common], help="compare against ground truth")
    s.add_argument("--ground-truth")
    s.add_argument("--out", help="report path (default: report.json next to the state)")
    s.set_defaults(func=cmd_evaluate, needs_state=True)

    s = sub.add_parser("export", parents=[common], help="export the model")
    s.add_argument("--format", choices=["ply", "json"], default="ply")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export, needs_state=True)

    s = sub.add_parser("run", parents=[common], help="run every stage, export and evaluate")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "needs_state", False) and not args.state:
        parser.error(f"{args.command} needs --state")
    try:
        return args.func(args)
    except MsfmError as exc:
        print(f"msfm: {exc}", file=sys.stderr)
        return exit_code(exc)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"msfm: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

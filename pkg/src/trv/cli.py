"""Command-line entry point wiring the library into end-to-end workflows.

Subcommands: sim-gen (synthetic dataset), train (fit decoder + vector),
predict (similarity/cost images and BEV costmaps), eval (classification
metrics or closed-loop collision runs), adapt (few-shot continuation).

Configuration lives in an optional JSON file with sections `seed`, `sim`,
`loss`, `train`, `bev` and `mppi`; unknown keys are rejected.  Flags are
kebab-case mirrors of the config keys and override file values.  Every
command writes the effective config into its output directory, and reruns
with identical config + seed are byte-identical.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
The TRV_THREADS environment variable caps internal parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields, is_dataclass, replace
from pathlib import Path
from typing import get_type_hints

import numpy as np

from .control import (
    CollisionFrame,
    GroundTruthBev,
    MppiConfig,
    VehicleState,
    evaluate_collisions,
)
from .costmap import (
    inpaint_nearest,
    load_bev,
    project_costs_to_bev,
    similarity_map,
    to_cost,
    write_bev,
)
from .errors import ConfigError, DataError, NumericError
from .features import (
    FeatureMap,
    FileEncoder,
    load_depth,
    load_feature_map,
    load_manifest,
    write_feature_map,
)
from .geometry import BevGridConfig, load_calibration
from .metrics import cell_label_grid, classification_metrics
from .simworld import SimConfig, emit_dataset, load_class_table
from .trainer import (
    LossConfig,
    TrainConfig,
    adapt,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_log,
)


class RunConfig:
    """Top-level seed plus one config object per module section."""

    def __init__(self):
        self.seed = 0
        self.sim = SimConfig()
        self.loss = LossConfig()
        self.train = TrainConfig()
        self.bev = BevGridConfig()
        self.mppi = MppiConfig()

    SECTIONS = ("sim", "loss", "train", "bev", "mppi")

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in self.SECTIONS:
            section = asdict(getattr(self, name))
            if name == "train":
                section["seed"] = self.seed
            out[name] = section
        return out


def _coerce_scalar(current, value, path: str):
    if isinstance(current, bool) or isinstance(value, bool):
        raise ConfigError(f"config key {path} does not take a boolean")
    if isinstance(current, int):
        if not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"config key {path} must be an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path} must be a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"config key {path} must be a list")
        return tuple(value)
    raise ConfigError(f"config key {path} cannot be set from a file")


def _rebuild(instance, updates: dict):
    """replace() with recentering: a resized BEV grid re-derives its origin."""
    if isinstance(instance, BevGridConfig) and "origin" not in updates:
        if updates.keys() & {"resolution", "x_extent", "y_extent"}:
            updates = {**updates, "origin": None}
    try:
        return replace(instance, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _merge_section(instance, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path} must be a JSON object")
    known = {f.name for f in fields(instance)}
    updates: dict = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path}.{key}")
        if path == "train" and key == "seed":
            raise ConfigError("set the seed at the top level, not under train")
        current = getattr(instance, key)
        if is_dataclass(current):
            updates[key] = _merge_section(current, value, f"{path}.{key}")
        else:
            updates[key] = _coerce_scalar(current, value, f"{path}.{key}")
    return _rebuild(instance, updates)


def load_run_config(path) -> RunConfig:
    run = RunConfig()
    if path is None:
        return run
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    for key, value in data.items():
        if key == "seed":
            run.seed = _coerce_scalar(0, value, "seed")
        elif key in RunConfig.SECTIONS:
            setattr(run, key, _merge_section(getattr(run, key), value, key))
        else:
            raise ConfigError(f"unknown config section {key}")
    return run


# ---------------------------------------------------------------------------
# Flag plumbing: every scalar config key becomes a kebab-case override flag.
# ---------------------------------------------------------------------------

_FLAG_SKIP = {("train", "seed"), ("train", "hidden"), ("bev", "origin")}


def _add_section_flags(parser, section: str, dc_type, prefix: tuple[str, ...] = (),
                       skip_names: frozenset[str] = frozenset()):
    hints = get_type_hints(dc_type)
    for f in fields(dc_type):
        if (section, f.name) in _FLAG_SKIP or f.name in skip_names:
            continue
        hint = hints[f.name]
        if is_dataclass(hint):
            _add_section_flags(parser, section, hint, prefix + (f.name,), skip_names)
        elif hint in (int, float):
            flag = "--" + "-".join(prefix + (f.name,)).replace("_", "-")
            dest = "__".join(("cfg", section) + prefix + (f.name,))
            parser.add_argument(
                flag, type=hint, default=None, dest=dest,
                help=f"override {'.'.join((section,) + prefix + (f.name,))}",
            )


def _set_config_path(instance, path: tuple[str, ...], value):
    if len(path) == 1:
        return _rebuild(instance, {path[0]: value})
    child = _set_config_path(getattr(instance, path[0]), path[1:], value)
    return _rebuild(instance, {path[0]: child})


def _apply_flag_overrides(run: RunConfig, args) -> None:
    for dest, value in sorted(vars(args).items()):
        if value is None or not dest.startswith("cfg__"):
            continue
        parts = tuple(dest.split("__")[1:])
        section, path = parts[0], parts[1:]
        setattr(run, section, _set_config_path(getattr(run, section), path, value))


def write_config_echo(out_dir, run: RunConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(run.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_frame_calibration(frame, cache: dict):
    key = str(frame.calibration)
    if key not in cache:
        cache[key] = load_calibration(frame.calibration)
    return cache[key]


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_sim_gen(args, run: RunConfig) -> int:
    if run.sim.n_frames == 0:
        print("warning: n_frames is 0; writing an empty manifest", file=sys.stderr)
    manifest = emit_dataset(args.out, run.sim, run.seed, bev_grid=run.bev)
    write_config_echo(args.out, run)
    print(f"wrote {run.sim.n_frames} frames to {manifest}")
    return 0


def cmd_train(args, run: RunConfig) -> int:
    frames = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = replace(run.train, seed=run.seed)
    result = train(frames, FileEncoder(), train_cfg, run.loss)
    save_checkpoint(out / "checkpoint.trvc", result.decoder, result.vector, run.loss)
    write_loss_log(out / "loss_log.csv", result.log)
    write_config_echo(out, run)
    for fidx, reason in result.skipped:
        print(f"skipped frame {fidx}: {reason}", file=sys.stderr)
    last = result.log[-1].loss_total if result.log else float("nan")
    print(
        f"trained on {len(frames)} frames"
        f" ({len(result.log)} updates, final loss {last:.6f});"
        f" checkpoint at {out / 'checkpoint.trvc'}"
    )
    return 0


def cmd_predict(args, run: RunConfig) -> int:
    frames = load_manifest(args.manifest)
    decoder, vector, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    calib_cache: dict = {}
    for idx, frame in enumerate(frames):
        frame_dir = out / "frames" / f"{idx:03d}"
        frame_dir.mkdir(parents=True, exist_ok=True)
        decoded = decoder.decode(load_feature_map(frame.features))
        sim = similarity_map(decoded, vector)
        costs = to_cost(sim)
        write_feature_map(
            frame_dir / "similarity.trvf",
            FeatureMap(values=sim.values[..., None], stride=sim.stride),
        )
        write_feature_map(
            frame_dir / "cost.trvf", FeatureMap(values=costs[..., None], stride=sim.stride)
        )
        intrinsics, rig, _ = _load_frame_calibration(frame, calib_cache)
        bev = project_costs_to_bev(
            costs, sim.stride, load_depth(frame.depth), intrinsics, rig, run.bev
        )
        write_bev(frame_dir / "bev.trvb", bev)
        write_bev(frame_dir / "bev_inpainted.trvb", inpaint_nearest(bev))
    write_config_echo(out, run)
    print(f"predicted {len(frames)} frames into {out}")
    return 0


def _pred_frame_dirs(pred_dir: Path, n_frames: int) -> list[Path]:
    frames_dir = pred_dir / "frames"
    if not frames_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} has no frames/ subdirectory")
    found = sorted(p for p in frames_dir.iterdir() if p.is_dir())
    if len(found) != n_frames:
        raise DataError(
            f"prediction frame count {len(found)} does not match manifest {n_frames}"
        )
    return found


def _goal_from_gt(gt: GroundTruthBev, traversable: dict[int, bool]) -> tuple[float, float]:
    """Farthest-forward traversable cell center, preferring the lane center."""
    trav_lut = np.zeros(max(traversable) + 1, dtype=bool)
    for cid, flag in traversable.items():
        trav_lut[cid] = flag
    mask = trav_lut[gt.classes]
    if not mask.any():
        raise DataError("ground truth grid has no traversable cell to use as a goal")
    rows, cols = np.nonzero(mask)
    far = rows == rows.max()
    cols_far = cols[far]
    centers_y = np.array([gt.grid.cell_center(int(rows.max()), int(j))[1] for j in cols_far])
    j = int(cols_far[np.argmin(np.abs(centers_y))])
    return gt.grid.cell_center(int(rows.max()), j)


def cmd_eval(args, run: RunConfig) -> int:
    frames = load_manifest(args.manifest)
    pred = Path(args.pred)
    out = Path(args.out)
    world_json = args.world or Path(args.manifest).parent / "world.json"
    cost_table, lethal_table, traversable, labeled = load_class_table(world_json)
    pred_dirs = _pred_frame_dirs(pred, len(frames))

    if args.mode == "metrics":
        from PIL import Image

        scores, labels = [], []
        for frame, frame_dir in zip(frames, pred_dirs):
            sim = load_feature_map(frame_dir / "similarity.trvf")
            semantic = np.asarray(Image.open(frame.image))
            cell_labels, valid = cell_label_grid(
                semantic, sim.stride, traversable, labeled
            )
            scores.append(sim.values[..., 0][valid])
            labels.append(cell_labels[valid])
        report = classification_metrics(
            np.concatenate(scores), np.concatenate(labels)
        ).to_dict()
        summary = f"auroc {report['auroc']:.4f} ap {report['ap']:.4f} f1 {report['f1']:.4f}"
    else:
        collision_frames = []
        for frame, frame_dir in zip(frames, pred_dirs):
            if frame.gt_bev is None:
                raise DataError(f"frame {frame.image} has no gt_bev; cannot run mppi eval")
            gt_raw = load_bev(frame.gt_bev)
            gt = GroundTruthBev(
                classes=np.rint(gt_raw.costs).astype(np.int64),
                cost_table=cost_table,
                lethal=lethal_table,
                grid=gt_raw.grid,
            )
            costmap = load_bev(frame_dir / "bev_inpainted.trvb")
            state = VehicleState(x=0.0, y=0.0, heading=0.0, speed=args.initial_speed)
            goal = _goal_from_gt(gt, traversable)
            collision_frames.append(
                CollisionFrame(costmap=costmap, gt=gt, state=state, goal=goal)
            )
        report = evaluate_collisions(collision_frames, run.mppi, seed=run.seed).to_dict()
        summary = (
            f"collisions {report['collisions']}/{report['successful_runs']}"
            f" rate {report['rate']:.4f}"
        )

    report["mode"] = args.mode
    report["n_frames"] = len(frames)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_config_echo(out, run)
    print(f"{args.mode}: {summary} ({out / 'report.json'})")
    return 0


def cmd_adapt(args, run: RunConfig) -> int:
    frames = load_manifest(args.manifest)[: args.frames]
    decoder, vector, loss_cfg = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = replace(run.train, seed=run.seed, epochs=args.epochs)
    result = adapt(decoder, vector, frames, FileEncoder(), train_cfg, loss_cfg)
    save_checkpoint(out / "checkpoint.trvc", result.decoder, result.vector, loss_cfg)
    write_loss_log(out / "loss_log.csv", result.log)
    write_config_echo(out, run)
    print(
        f"adapted on {len(frames)} frames x {args.epochs} epochs;"
        f" checkpoint at {out / 'checkpoint.trvc'}"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trv",
        description="Self-supervised traversability estimation toolkit.",
        epilog=(
            "Exit codes: 0 success, 2 config error, 3 data error, 4 numeric"
            " failure.  TRV_THREADS caps internal parallelism."
        ),
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config file")
        p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")

    p = sub.add_parser("sim-gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_section_flags(p, "sim", SimConfig)
    p.set_defaults(func=cmd_sim_gen)

    p = sub.add_parser("train", help="train decoder + traversability vector")
    common(p)
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="output directory")
    _add_section_flags(p, "loss", LossConfig)
    _add_section_flags(p, "train", TrainConfig)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write similarity/cost images and BEV costmaps")
    common(p)
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint.trvc")
    p.add_argument("--out", required=True, help="output directory")
    _add_section_flags(p, "bev", BevGridConfig)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--pred", required=True, help="directory written by predict")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--mode", choices=("metrics", "mppi"), default="metrics")
    p.add_argument("--world", default=None, help="world.json (default: next to manifest)")
    p.add_argument("--initial-speed", type=float, default=2.0,
                   help="vehicle speed at rollout start (mppi mode)")
    _add_section_flags(p, "mppi", MppiConfig)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adapt", help="few-shot continuation from a checkpoint")
    common(p)
    p.add_argument("--manifest", required=True, help="few-shot dataset manifest.json")
    p.add_argument("--checkpoint", required=True, help="starting checkpoint.trvc")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=10,
                   help="number of leading manifest frames to use (default 10)")
    p.add_argument("--epochs", type=int, default=2,
                   help="adaptation epochs (default 2)")
    _add_section_flags(p, "train", TrainConfig, skip_names=frozenset({"epochs"}))
    p.set_defaults(func=cmd_adapt)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help(file=sys.stderr)
        return 2
    try:
        run = load_run_config(args.config)
        if args.seed is not None:
            run.seed = args.seed
        _apply_flag_overrides(run, args)
        return args.func(args, run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

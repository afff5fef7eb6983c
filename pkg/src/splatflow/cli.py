"""Command-line interface.

Subcommands: gen-scene, train, render, track, eval. Training configuration
precedence is flags > config file > built-in defaults. The SPLATFLOW_OUT
environment variable supplies the default output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datakit, trackeval
from .datakit import Checkpoint, SceneSpec, default_output_dir
from .errors import SplatflowError
from .field import FieldConfig
from .trainer import TrainConfig, Trainer, render_view


def _add_gen_scene(sub):
    p = sub.add_parser("gen-scene", help="generate a synthetic multi-view scene")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--grid-res", type=int, default=40)
    p.add_argument("--num-cameras", type=int, default=12)
    p.add_argument("--num-timesteps", type=int, default=20)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--deformation", default="drop_on_sphere",
                   choices=["drop_on_sphere", "wave", "none"])
    p.add_argument("--texture", default="checker",
                   choices=["checker", "noise", "half_uniform"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wave-amplitude", type=float, default=0.15)


TRAIN_FLAGS = (
    ("iterations", int), ("coarse_iterations", int), ("prune_interval", int),
    ("lambda_w", float), ("lambda_momentum", float), ("lambda_iso", float),
    ("knn_k", int), ("mask_loss_weight", float), ("dynamic_threshold", float),
    ("prune_opacity_threshold", float), ("seed", int), ("init_points", int),
    ("lr_positions", float), ("lr_rotations", float), ("lr_scales", float),
    ("lr_opacities", float), ("lr_colors", float), ("lr_masks", float),
    ("lr_planes", float), ("lr_mlp", float),
)


def _add_train(sub):
    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    for name, typ in TRAIN_FLAGS:
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None)
    p.add_argument("--feature-size", type=int, default=None)
    p.add_argument("--hidden-width", type=int, default=None)
    p.add_argument("--progress-every", type=int, default=500)


def _add_render(sub):
    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True,
                   help="dataset directory providing the camera")
    p.add_argument("--camera", required=True, help="camera id from the manifest")
    p.add_argument("--time", type=float, default=0.0, help="normalized time in [0, 1]")
    p.add_argument("--out", type=Path, default=None, help="output PNG path")


def _add_track(sub):
    p = sub.add_parser("track", help="recover 3D trajectories from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--queries", type=Path,
                       help="trajectory file; its first-timestep positions are tracked")
    group.add_argument("--all-dynamic", action="store_true",
                       help="track every dynamic Gaussian center")
    p.add_argument("--num-times", type=int, default=20,
                   help="evaluation times for --all-dynamic (uniform in [0, 1])")
    p.add_argument("--knn", type=int, default=trackeval.DEFAULT_TRACK_KNN)
    p.add_argument("--out", type=Path, default=None, help="output trajectory file")


def _add_eval(sub):
    p = sub.add_parser("eval", help="compare predicted and ground-truth trajectories")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--sample", type=int, default=None,
                   help="evaluate on a seeded subsample of points")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="report JSON path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatflow",
        description="Dynamic Gaussian splatting with dense 3D tracking",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_scene(sub)
    _add_train(sub)
    _add_render(sub)
    _add_track(sub)
    _add_eval(sub)
    return parser


def _resolve_out(arg, default_name: str) -> Path:
    return Path(arg) if arg is not None else default_output_dir() / default_name


def _cmd_gen_scene(args) -> int:
    out = _resolve_out(args.out, "scene")
    spec = SceneSpec(
        grid_res=args.grid_res, num_cameras=args.num_cameras,
        num_timesteps=args.num_timesteps, image_size=args.image_size,
        deformation_kind=args.deformation, texture_kind=args.texture,
        seed=args.seed, wave_amplitude=args.wave_amplitude,
    )
    gen = datakit.generate_scene(spec, out)
    n_frames = len(gen.dataset.frames)
    print(f"wrote {n_frames} frames to {gen.root}")
    return 0


def build_train_config(args) -> TrainConfig:
    """flags > config file > defaults."""
    values = {}
    field_values = {}
    if args.config is not None:
        with open(args.config) as fh:
            doc = json.load(fh)
        field_values.update(doc.pop("field", {}))
        values.update(doc)
    for name, _ in TRAIN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    if args.feature_size is not None:
        field_values["feature_size"] = args.feature_size
    if args.hidden_width is not None:
        field_values["hidden_width"] = args.hidden_width
    for key in ("base_resolution", "levels"):
        if key in field_values:
            field_values[key] = tuple(field_values[key])
    return TrainConfig(field=FieldConfig(**field_values), **values)


def train_and_save(dataset, config: TrainConfig, out_dir: Path,
                   progress_every: int = 0) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    t = Trainer(dataset, config, log_path=out_dir / "train_log.jsonl")
    t.train(progress_every=progress_every)
    ckpt_path = out_dir / "checkpoint.ckpt"
    phase = "fine" if config.iterations > config.coarse_iterations else "coarse"
    datakit.save_checkpoint(
        ckpt_path,
        Checkpoint(
            gaussians=t.gaussians, field=t.field, dynamic=t.dynamic,
            phase=phase, iteration=t.iteration, config_echo=config.to_dict(),
        ),
    )
    return ckpt_path


def _cmd_train(args) -> int:
    dataset = datakit.load_dataset(args.data)
    config = build_train_config(args)
    out = _resolve_out(args.out, "run")
    ckpt = train_and_save(dataset, config, out, progress_every=args.progress_every)
    print(f"wrote {ckpt}")
    return 0


def _cmd_render(args) -> int:
    ck = datakit.load_checkpoint(args.checkpoint)
    dataset = datakit.load_dataset(args.data)
    if args.camera not in dataset.cameras:
        raise SplatflowError(f"camera {args.camera!r} not in dataset manifest")
    cam = dataset.cameras[args.camera]
    if ck.phase == "coarse":
        out = render_view(ck.gaussians, cam)
    else:
        out = render_view(ck.gaussians, cam, field=ck.field, dynamic=ck.dynamic,
                          t=args.time)
    path = _resolve_out(args.out, "render.png")
    datakit.save_image(path, out.rgb)
    print(f"wrote {path}")
    return 0


def _cmd_track(args) -> int:
    ck = datakit.load_checkpoint(args.checkpoint)
    if ck.phase == "coarse" or not np.any(ck.dynamic):
        from .errors import DegenerateModelError

        raise DegenerateModelError("checkpoint has no dynamic Gaussians to track")
    if args.queries is not None:
        gt = datakit.load_trajectories(args.queries)
        query = trackeval.TrackQuery(
            points=gt.positions[:, 0, :], t0=float(gt.times[0]), eval_times=gt.times
        )
        traj = trackeval.track_point(query, ck.gaussians, ck.field, ck.dynamic,
                                     knn_size=args.knn)
    else:
        times = np.linspace(0.0, 1.0, max(args.num_times, 2))
        traj = trackeval.track_all_dynamic(ck.gaussians, ck.field, ck.dynamic, times)
    path = _resolve_out(args.out, "trajectories.bin")
    datakit.save_trajectories(path, traj)
    print(f"wrote {path} ({traj.num_points} points x {traj.num_steps} steps)")
    return 0


def _cmd_eval(args) -> int:
    pred = datakit.load_trajectories(args.pred)
    gt = datakit.load_trajectories(args.gt)
    if args.sample is not None:
        idx = trackeval.sample_point_indices(gt.num_points, args.sample, args.seed)
        pred = trackeval.subsample(pred, idx)
        gt = trackeval.subsample(gt, idx)
    report = trackeval.make_report(pred, gt)
    print(json.dumps(report.to_dict(), sort_keys=True))
    if args.out is not None:
        trackeval.save_report(args.out, report)
    return 0


COMMANDS = {
    "gen-scene": _cmd_gen_scene,
    "train": _cmd_train,
    "render": _cmd_render,
    "track": _cmd_track,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (SplatflowError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

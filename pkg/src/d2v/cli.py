"""Command-line interface: d2v <make-scene|train|render|evaluate|gradcheck>.

Exit codes: 0 success, 1 check/acceptance failure, 2 usage or input
error, 3 numerical failure. `--threads` defaults to the D2V_THREADS
environment variable (or 1); single-threaded runs are bit-reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import TRAIN_PRESETS, UsageError, resolve_config
from .dataset import generate_dataset, load_dataset
from .images import write_pgm16, write_ppm
from .losses import LossWeights
from .metrics import evaluate_decoupling
from .model import RENDER_MODES, SceneModel
from .scenes import SCENE_PRESETS, scene_preset
from .trainer import (NumericalError, build_model_for_dataset, gradient_check,
                      random_scene_model, train)


def _default_threads() -> int:
    try:
        return max(int(os.environ.get("D2V_THREADS", "1")), 1)
    except ValueError:
        return 1


def _add_make_scene(sub):
    p = sub.add_parser("make-scene", help="generate a synthetic dataset")
    p.add_argument("--preset", required=True, help=f"one of {SCENE_PRESETS}")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--val-count", type=int, default=8)
    p.add_argument("--gt-samples", type=int, default=256)


def _add_train(sub):
    p = sub.add_parser("train", help="train a decoupled model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="syn_default",
                   help=f"one of {sorted(TRAIN_PRESETS)}")
    p.add_argument("--config", default=None,
                   help="resolved-config JSON; takes the place of --preset")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted-key config override")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--quiet", action="store_true")


def _add_render(sub):
    p = sub.add_parser("render", help="render images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="composite", choices=RENDER_MODES)
    p.add_argument("--data", required=True, help="dataset providing the camera")
    p.add_argument("--pose-index", type=int, default=None, help="training pose")
    p.add_argument("--val-index", type=int, default=None, help="validation pose")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--samples", type=int, default=256)


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="decoupling metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--rho-threshold", type=float, default=0.2)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--per-frame", default=None, help="write per-frame CSV")


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--res", type=int, default=8)
    p.add_argument("--corrupt", action="store_true",
                   help="corrupt one gradient entry; the check must fail")


def cmd_make_scene(args) -> int:
    if args.preset not in SCENE_PRESETS:
        print(f"unknown scene preset {args.preset!r}; available: {SCENE_PRESETS}",
              file=sys.stderr)
        return 2
    scene = scene_preset(args.preset, n_frames=args.frames, resolution=args.res,
                         n_val=args.val_count)
    generate_dataset(scene, args.out, seed=args.seed, preset=args.preset,
                     n_samples=args.gt_samples)
    print(f"wrote dataset to {args.out}")
    return 0


def cmd_train(args) -> int:
    if not os.path.isdir(args.data):
        print(f"dataset directory {args.data!r} not found", file=sys.stderr)
        return 2
    base = None
    if args.config is not None:
        with open(args.config) as f:
            base = json.load(f)
    cfg, resolved = resolve_config(
        preset=None if base is not None else args.preset,
        overrides=args.overrides, base=base,
    )
    if args.seed is not None:
        cfg.seed = args.seed
        resolved["seed"] = args.seed
    cfg.threads = args.threads if args.threads is not None else _default_threads()
    resolved["threads"] = cfg.threads

    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved_config.json"), "w") as f:
        json.dump(resolved, f, indent=1, sort_keys=True)

    model = build_model_for_dataset(dataset, cfg)
    train(model, dataset, cfg, out_dir=args.out, quiet=args.quiet)
    _write_contact_sheet(model, dataset, os.path.join(args.out, "contact_sheet.ppm"))
    print(f"training complete; checkpoint at {os.path.join(args.out, 'checkpoint_final')}")
    return 0


def _write_contact_sheet(model: SceneModel, dataset, path) -> None:
    cam = dataset.val_cameras[0]
    views = model.render_image(cam, 0.0, n_samples=128)
    panels = [
        views["composite"],
        views["static"],
        views["dynamic_white"],
        np.repeat(views["alpha"][:, :, None], 3, axis=2),
        np.repeat(views["rho"][:, :, None], 3, axis=2),
    ]
    write_ppm(path, np.concatenate(panels, axis=1))


def cmd_render(args) -> int:
    try:
        model = SceneModel.load(args.checkpoint)
    except (OSError, ValueError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return 2
    dataset = load_dataset(args.data)
    if (args.pose_index is None) == (args.val_index is None):
        print("specify exactly one of --pose-index / --val-index", file=sys.stderr)
        return 2
    if args.pose_index is not None:
        if not (0 <= args.pose_index < dataset.n_frames):
            print(f"pose index out of range [0, {dataset.n_frames})", file=sys.stderr)
            return 2
        camera = dataset.cameras[args.pose_index]
        tau = dataset.times[args.pose_index] if args.tau is None else args.tau
    else:
        if not (0 <= args.val_index < len(dataset.val_cameras)):
            print("val index out of range", file=sys.stderr)
            return 2
        camera = dataset.val_cameras[args.val_index]
        tau = 0.0 if args.tau is None else args.tau

    views = model.render_image(camera, float(tau), n_samples=args.samples)
    if args.mode in ("composite", "static", "dynamic_white"):
        write_ppm(args.out, views[args.mode])
    elif args.mode in ("alpha", "rho"):
        write_pgm16(args.out, views[args.mode], 0.0, 1.0)
    else:  # depth
        write_pgm16(args.out, views["depth"], model.t_near, model.t_far)
    print(f"wrote {args.mode} render to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    try:
        model = SceneModel.load(args.checkpoint)
    except (OSError, ValueError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return 2
    dataset = load_dataset(args.data)
    report = evaluate_decoupling(model, dataset, threshold=args.threshold,
                                 rho_threshold=args.rho_threshold,
                                 n_samples=args.samples)
    print(report.to_table())
    if args.out is not None:
        with open(args.out, "w") as f:
            f.write(report.to_json())
    if args.per_frame is not None:
        import csv as _csv
        with open(args.per_frame, "w", newline="") as f:
            keys = sorted({k for row in report.per_frame for k in row})
            writer = _csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            writer.writerows(report.per_frame)
    return 0


def cmd_gradcheck(args) -> int:
    model = random_scene_model(seed=args.seed, res=args.res, use_shadow=True)
    weights = LossWeights(lambda_s=0.3, lambda_r=0.2, lambda_sigma_s=0.15,
                          lambda_rho=0.25, skew=1.75)
    report = gradient_check(model, weights, n_probes=args.probes, h=args.h,
                            tolerance=args.tol, seed=args.seed,
                            corrupt=args.corrupt)
    print(report.summary())
    if args.corrupt:
        return 0 if not report.passed else 1
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="d2v",
        description="Train and evaluate decoupled dynamic/static/shadow "
                    "volume-rendering models on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_make_scene(sub)
    _add_train(sub)
    _add_render(sub)
    _add_evaluate(sub)
    _add_gradcheck(sub)
    args = parser.parse_args(argv)

    handlers = {
        "make-scene": cmd_make_scene,
        "train": cmd_train,
        "render": cmd_render,
        "evaluate": cmd_evaluate,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.details:
            print(json.dumps(exc.details, indent=1), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``planemvs {run,synth,eval,ablate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import MVSError
from ..scene_io import parse_sparse_model, read_depth_map, read_ply
from .config import KEYS, PipelineConfig, load_config
from .evaluate import evaluate_cloud, evaluate_depth_maps
from .run import ablate, run
from .synthetic import SceneSpec, gen_scene, load_ground_truth, save_scene

logger = logging.getLogger("planemvs")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file overriding defaults")
    group = p.add_argument_group("configuration keys")
    for key in KEYS:
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}", metavar="V")


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config is not None:
        cfg = load_config(args.config, cfg)
    flags = {
        k: getattr(args, f"opt_{k}")
        for k in KEYS
        if getattr(args, f"opt_{k}", None) is not None
    }
    if getattr(args, "input", None) is not None:
        flags["input_dir"] = str(args.input)
    if getattr(args, "output", None) is not None:
        flags["output_dir"] = str(args.output)
    try:
        return cfg.with_options(**flags)
    except (TypeError, ValueError) as exc:
        raise MVSError(f"bad option: {exc}") from None


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    result = run(cfg)
    print(f"points={len(result.cloud)}")
    if result.report is None:
        for name, seconds in result.timings.items():
            print(f"time_{name}={seconds!r}")
    else:
        sys.stdout.write(result.report.to_text())
        sys.stdout.write(result.cloud_report.to_text("cloud_"))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    results = ablate(cfg)
    for name, result in results.items():
        print(f"{name}.points={len(result.cloud)}")
        if result.report is not None:
            sys.stdout.write(result.report.to_text(f"{name}."))
    return 0


def _cmd_synth(args) -> int:
    overrides = {}
    for name in ("width", "height", "seed", "n_cameras"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    spec = SceneSpec.preset(args.preset, **overrides)
    scene = gen_scene(spec)
    save_scene(scene, args.output)
    print(f"images={len(scene.images)}")
    print(f"points3d={len(scene.model.points3d)}")
    return 0


def _cmd_eval(args) -> int:
    model = parse_sparse_model(Path(args.scene) / "sparse")
    gt = load_ground_truth(args.scene, model)
    if gt is None:
        raise MVSError(f"no ground truth under {args.scene}")
    result = Path(args.result)
    if result.is_dir():
        maps = {}
        for image_id in model.images:
            path = result / f"{image_id}.phim"
            if path.is_file():
                maps[image_id] = read_depth_map(path)
        report = evaluate_depth_maps(maps, gt, args.tol)
    else:
        cloud = read_ply(result)
        cams = {i: model.camera(i) for i in model.images}
        report = evaluate_cloud(cloud.positions, cams, gt, args.tol)
    sys.stdout.write(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planemvs", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="reconstruct a scene directory")
    p.add_argument("--input", type=Path)
    p.add_argument("--output", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("ablate", help="compare runs with and without plane inference")
    p.add_argument("--input", type=Path)
    p.add_argument("--output", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("synth", help="render a synthetic scene with ground truth")
    p.add_argument("--preset", default="textured", choices=("fronto", "textured", "frame"))
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--cameras", dest="n_cameras", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval", help="score depth maps or a PLY against ground truth")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--result", type=Path, required=True,
                   help="directory of .phim depth maps or a .ply cloud")
    p.add_argument("--tol", type=float, default=0.01)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MVSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: compress, decompress, stats, verify, toy-train, render.

A config file (--config) mirrors every flag; it is JSON or flat `key = value`
lines with the flag names (dashes or underscores). Explicit flags win over
the config file. TC3DGS_THREADS caps worker threads for row-parallel stages.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .keypoints import KeypointConfig
from .pipeline import (
    PipelineConfig,
    compress,
    decompress,
    format_stats,
    stats,
    verify,
)
from .quant import BitRange
from .renderer import View, format_psnr, make_default_views, render, write_float_dump, write_ppm
from .scene import load_scene_auto, make_synthetic_scene, save_scene


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, float):
        return "exact" if np.isinf(obj) else obj
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return _jsonify(float(obj))
    return obj


def _load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError("config root must be an object")
        return {k.replace("-", "_"): v for k, v in data.items()}
    except json.JSONDecodeError:
        pass
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = json.loads(value)
    return out


_CONFIG_KEYS = {
    "mask_threshold": float,
    "lambda_mask": float,
    "lambda_mc": float,
    "mask_steps": int,
    "mask_carry_steps": int,
    "mask_lr": float,
    "mask_target_noise": float,
    "bits_min": int,
    "bits_max": int,
    "quantize_after": int,
    "step_lr": float,
    "qat_steps": int,
    "qat_lr": float,
    "kp_tolerance": float,
    "kp_max": int,
    "seed": int,
    "psnr_threshold": float,
    "masking": bool,
    "quantize": bool,
    "keypoints": bool,
}


def _build_pipeline_config(args) -> PipelineConfig:
    values = {}
    if getattr(args, "config", None):
        for key, value in _load_config_file(args.config).items():
            if key not in _CONFIG_KEYS:
                raise SystemExit(f"unknown config key {key!r}")
            values[key] = _CONFIG_KEYS[key](value)
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "no_masking", False):
        values["masking"] = False
    if getattr(args, "no_quantize", False):
        values["quantize"] = False
    if getattr(args, "no_keypoints", False):
        values["keypoints"] = False

    base = PipelineConfig()
    bit_range = BitRange(
        values.pop("bits_min", base.bit_range.b_min),
        values.pop("bits_max", base.bit_range.b_max),
    )
    keypoint = KeypointConfig(
        values.pop("kp_tolerance", base.keypoint.tolerance),
        values.pop("kp_max", base.keypoint.max_keypoints),
    )
    return PipelineConfig(bit_range=bit_range, keypoint=keypoint, **values)


def _add_pipeline_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON or key=value config file mirroring these flags")
    p.add_argument("--mask-threshold", dest="mask_threshold", type=float)
    p.add_argument("--lambda-mask", dest="lambda_mask", type=float)
    p.add_argument("--lambda-mc", dest="lambda_mc", type=float)
    p.add_argument("--mask-steps", dest="mask_steps", type=int)
    p.add_argument("--mask-carry-steps", dest="mask_carry_steps", type=int)
    p.add_argument("--mask-lr", dest="mask_lr", type=float)
    p.add_argument("--mask-target-noise", dest="mask_target_noise", type=float)
    p.add_argument("--bits-min", dest="bits_min", type=int)
    p.add_argument("--bits-max", dest="bits_max", type=int)
    p.add_argument("--quantize-after", dest="quantize_after", type=int)
    p.add_argument("--step-lr", dest="step_lr", type=float)
    p.add_argument("--qat-steps", dest="qat_steps", type=int)
    p.add_argument("--qat-lr", dest="qat_lr", type=float)
    p.add_argument("--kp-tolerance", dest="kp_tolerance", type=float)
    p.add_argument("--kp-max", dest="kp_max", type=int)
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--psnr-threshold", dest="psnr_threshold", type=float)
    p.add_argument("--no-masking", action="store_true")
    p.add_argument("--no-quantize", action="store_true")
    p.add_argument("--no-keypoints", action="store_true")
    p.add_argument("--view-size", dest="view_size", type=int, default=24,
                   help="edge length of auto-generated per-frame views")


def _load_views(args, scene):
    if getattr(args, "views", None):
        with open(args.views, "r", encoding="utf-8") as f:
            spec = json.load(f)
        return [View.from_dict(d) for d in spec]
    return make_default_views(scene, width=args.view_size, height=args.view_size)


def _cmd_compress(args) -> int:
    scene = load_scene_auto(args.scene)
    cfg = _build_pipeline_config(args)
    views = _load_views(args, scene)
    data, report = compress(scene, views, cfg)
    with open(args.output, "wb") as f:
        f.write(data)
    print(json.dumps(_jsonify(report), indent=2))
    return 0


def _cmd_decompress(args) -> int:
    with open(args.container, "rb") as f:
        data = f.read()
    scene = decompress(data)
    save_scene(scene, args.output)
    print(f"wrote {scene.num_gaussians} gaussians x {scene.num_frames} frames to {args.output}")
    return 0


def _cmd_stats(args) -> int:
    with open(args.container, "rb") as f:
        data = f.read()
    info = stats(data)
    if args.json:
        print(json.dumps(_jsonify(info), indent=2))
    else:
        print(format_stats(info))
    return 0


def _cmd_verify(args) -> int:
    with open(args.container, "rb") as f:
        data = f.read()
    reference = load_scene_auto(args.ref)
    views = _load_views(args, reference)
    threshold = args.psnr_threshold if args.psnr_threshold is not None else 30.0
    ok, metrics = verify(data, reference, views, psnr_threshold=threshold)
    print(json.dumps(_jsonify(metrics), indent=2))
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_toy_train(args) -> int:
    scene = make_synthetic_scene(
        n_static=args.static, n_moving=args.moving, frames=args.frames, seed=args.seed or 0
    )
    cfg = _build_pipeline_config(args)
    views = make_default_views(scene, width=args.view_size, height=args.view_size)
    data, report = compress(scene, views, cfg)
    print(json.dumps(_jsonify(report), indent=2))
    if args.output:
        with open(args.output, "wb") as f:
            f.write(data)
        print(f"container written to {args.output}")
    return 0


def _cmd_render(args) -> int:
    scene = load_scene_auto(args.scene)
    if args.view:
        view = View.from_dict(json.loads(args.view))
    else:
        view = make_default_views(
            scene, width=args.view_size, height=args.view_size, frames=[args.frame]
        )[0]
    img = render(scene, view)
    write_ppm(img, args.output)
    if args.float_dump:
        write_float_dump(img, args.float_dump)
    print(f"rendered frame {view.frame_index} ({view.width}x{view.height}) to {args.output}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tc3dgs",
        description="Compress dynamic Gaussian scenes with temporal masks, "
        "mixed-precision quantization, and keypoint trajectories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress a scene file into a .tc3d container")
    p.add_argument("scene")
    p.add_argument("--views", help="JSON file with a list of view objects")
    p.add_argument("-o", "--output", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(fn=_cmd_compress)

    p = sub.add_parser("decompress", help="decode a container back into a scene file")
    p.add_argument("container")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=_cmd_decompress)

    p = sub.add_parser("stats", help="print a container breakdown")
    p.add_argument("container")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=_cmd_stats)

    p = sub.add_parser("verify", help="check a container against a reference scene")
    p.add_argument("container")
    p.add_argument("--ref", required=True)
    p.add_argument("--views")
    p.add_argument("--psnr-threshold", dest="psnr_threshold", type=float)
    p.add_argument("--view-size", dest="view_size", type=int, default=24)
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("toy-train", help="mask training + quantization demo on a synthetic scene")
    p.add_argument("--static", type=int, default=40)
    p.add_argument("--moving", type=int, default=10)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("-o", "--output")
    _add_pipeline_flags(p)
    p.set_defaults(fn=_cmd_toy_train)

    p = sub.add_parser("render", help="render one frame to PPM")
    p.add_argument("scene")
    p.add_argument("--view", help="inline JSON view object")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--view-size", dest="view_size", type=int, default=64)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--float-dump", dest="float_dump")
    p.set_defaults(fn=_cmd_render)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points: ``relume synth|train|render|eval``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__

log = logging.getLogger("relume")

STAGE_FLAGS = {"sdf-init": "sdf_init", "mat-init": "mat_init", "joint": "joint"}


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("RELUME_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"RELUME_LOG must be one of {', '.join(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# -- synth -------------------------------------------------------------------

def cmd_synth(scene_name: str, out_dir, views: int = 20, size: int = 64, seed: int = 0, ldr: bool = False,
              samples: int = 256, points: int = 5000):
    from .scene import synthetic as S
    from .scene.dataset import OrientedPointCloud, write_dataset

    try:
        scene = S.builtin_scene(scene_name)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    if views < 1 or size < 1:
        raise UsageError("--views and --size must be positive")
    cams = S.scene_cameras(scene, views, size)
    images, base, rough, metal = [], [], [], []
    for k, cam in enumerate(cams):
        log.info("rendering view %d/%d", k + 1, len(cams))
        images.append(S.render_ground_truth(scene, cam, samples=samples))
        b, r, m = S.material_maps(scene, cam)
        base.append(b)
        rough.append(r)
        metal.append(m)
    pts, nrm = scene.sample_surface(points, seed=seed)
    write_dataset(out_dir, cams, images, hdr=not ldr, bound=scene.bound, point_cloud=OrientedPointCloud(pts, nrm),
                  materials={"basecolor": base, "roughness": rough, "metallic": metal},
                  scene_description=scene.to_dict())
    return Path(out_dir)


# -- train -------------------------------------------------------------------

def load_config(path):
    from .trainer import TrainConfig

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict) or "dataset" not in raw:
        raise UsageError(f"{path}: config needs a 'dataset' entry")
    dataset = raw.pop("dataset")
    out = raw.pop("out", None)
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    base = path.parent
    return cfg, (base / dataset), (base / out if out else None)


def cmd_train(config_path, seed=None, threads=None, stage=None, out=None):
    from dataclasses import replace

    from .scene.dataset import load_dataset
    from .trainer import run_training

    cfg, dataset_path, cfg_out = load_config(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if threads is not None:
        if threads < 1:
            raise UsageError("--threads must be at least 1")
        cfg = replace(cfg, threads=threads)
    out_dir = Path(out) if out else cfg_out
    if out_dir is None:
        raise UsageError("no output directory: pass --out or set 'out' in the config")
    stages = ("sdf_init", "mat_init", "joint")
    if stage is not None:
        stages = stages[: stages.index(STAGE_FLAGS[stage]) + 1]
    dataset = load_dataset(dataset_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "dataset": str(dataset_path),
        "stages": list(stages),
        "outputs": {s: str(out_dir / f"{s}.ckpt") for s in stages} | {"log": str(out_dir / "train_log.csv"),
                                                                     "timings": str(out_dir / "timings.json")},
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return run_training(cfg, dataset, out_dir, stages)


# -- render ------------------------------------------------------------------

def _cameras_from_meta(meta):
    from .scene.camera import Camera

    return [Camera.from_dict(c) for c in meta["cameras"]]


def cmd_render(checkpoint, camera_index: int, mode: str, out_dir, samples: int = 64):
    from .checkpoint import load_checkpoint
    from .render import MODES, render_image
    from .scene.dataset import write_pfm, write_png

    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; valid modes: {', '.join(MODES)}")
    fields, meta = load_checkpoint(checkpoint)
    cams = _cameras_from_meta(meta)
    if not 0 <= camera_index < len(cams):
        raise UsageError(f"camera index {camera_index} out of range (checkpoint has {len(cams)} cameras)")
    img = render_image(fields, cams[camera_index], meta["bound"], mode, samples,
                       background=meta.get("background", (0.0, 0.0, 0.0)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / f"{mode}_{camera_index:03d}"
    write_pfm(stem.with_suffix(".pfm"), img)
    if mode in ("volume", "pbr"):
        write_png(stem.with_suffix(".png"), img)
    else:
        # material and normal channels are stored values, not radiance: no sRGB curve
        from PIL import Image

        Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)).save(stem.with_suffix(".png"))
    return stem.with_suffix(".pfm"), stem.with_suffix(".png")


# -- eval --------------------------------------------------------------------

def _json_number(x: float):
    if math.isinf(x):
        return "+inf" if x > 0 else "-inf"
    if math.isnan(x):
        return None
    return x


def cmd_eval(checkpoint, dataset_path, use_gt: bool = True, samples: int = 64, mesh_resolution: int = 64):
    from .checkpoint import load_checkpoint
    from .render import render_image
    from .scene.dataset import load_dataset
    from .scene.metrics import chamfer_distance, material_mae, normal_angle, psnr, sample_mesh
    from .scene.synthetic import SyntheticScene
    from .volren import extract_mesh, field_sdf_fn

    fields, meta = load_checkpoint(checkpoint)
    ds = load_dataset(dataset_path)
    every = meta.get("train_config", {}).get("holdout_every", 10) or 0
    held = [k for k in range(len(ds)) if every and k % every == every - 1]
    bg = meta.get("background", (0.0, 0.0, 0.0))
    report: dict = {"checkpoint": str(checkpoint), "dataset": str(dataset_path), "held_out_views": held,
                    "psnr": {}, "notices": []}
    for k in held:
        img = render_image(fields, ds.cameras[k], ds.bound, "volume", samples, background=bg)
        report["psnr"][str(k)] = _json_number(psnr(img, ds.images[k]))
    scene_desc = ds.extra.get("scene") if use_gt else None
    if scene_desc is not None:
        scene = SyntheticScene.from_dict(scene_desc)
        mesh = extract_mesh(field_sdf_fn(fields.sdf), mesh_resolution, ds.bound)
        if mesh.empty:
            report["notices"].append("extracted mesh is empty; geometry metrics omitted")
        else:
            p, n = sample_mesh(mesh.vertices, mesh.faces, 100_000)
            g, gn = scene.sample_surface(100_000, seed=1)
            report["chamfer"] = chamfer_distance(p, g)
            report["normal_angle_deg"] = normal_angle(p, n, g, gn)
    else:
        report["notices"].append("no ground-truth scene description; geometry metrics omitted")
    if use_gt and ds.materials is not None:
        rows = {}
        for name, mode in (("basecolor", "basecolor"), ("roughness", "roughness"), ("metallic", "metallic")):
            errs = [material_mae(render_image(fields, ds.cameras[k], ds.bound, mode, samples), ds.materials[name][k])
                    for k in held]
            errs = [e for e in errs if not math.isnan(e)]
            if errs:
                rows[name] = float(np.mean(errs))
        report["material_mae"] = rows
    else:
        report["notices"].append("no ground-truth material maps; material rows omitted")
    return report


# -- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relume", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"relume {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a built-in analytic scene into a dataset")
    s.add_argument("scene")
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=int, default=256, help="hemisphere samples of the reference renderer")
    s.add_argument("--ldr", action="store_true", help="write 8-bit sRGB PNGs instead of PFM")

    t = sub.add_parser("train", help="run the three-stage optimization")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--stage", choices=sorted(STAGE_FLAGS), help="stop after this stage")
    t.add_argument("--out")

    r = sub.add_parser("render", help="render one channel of a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("camera", type=int)
    r.add_argument("--mode", default="volume")
    r.add_argument("--out", default=".")
    r.add_argument("--samples", type=int, default=64)

    e = sub.add_parser("eval", help="metrics report of a checkpoint against a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--gt", action="store_true", help="also score geometry and materials against ground truth")
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    from .checkpoint import CheckpointError
    from .scene.dataset import DatasetError

    try:
        _setup_logging()
        if args.command == "synth":
            torch.set_num_threads(1)
            cmd_synth(args.scene, args.out, args.views, args.size, args.seed, args.ldr, args.samples)
        elif args.command == "train":
            cmd_train(args.config, args.seed, args.threads, args.stage, args.out)
        elif args.command == "render":
            for path in cmd_render(args.checkpoint, args.camera, args.mode, args.out, args.samples):
                print(path)
        elif args.command == "eval":
            text = json.dumps(cmd_eval(args.checkpoint, args.dataset, args.gt), indent=1)
            if args.out:
                Path(args.out).write_text(text)
            else:
                print(text)
    except UsageError as exc:
        print(f"relume: error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"relume: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary reports and exits
        log.debug("failure", exc_info=True)
        print(f"relume: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

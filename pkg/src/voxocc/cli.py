"""Command-line front end: gen, train, eval, check, export.

Exit codes: 0 success, 1 property or numeric failure, 2 usage or config
error. OCCU_SEED in the environment overrides the seed of whichever
command runs. Every command writes the same bytes for the same seed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks, fileio
from .config import RunConfig
from .errors import (CheckpointError, ContractViolation, GradientError,
                     NumericError)
from .model import OccupancyModel
from .synth import (CLASS_NAMES, N_CLASSES, Sample, SceneSpec, generate,
                    ground_box_for)
from .trainer import build_or_load_vt, evaluate, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


# ----------------------------------------------------------------- dataset

def _write_sample(out_dir: Path, name: str, sample: Sample) -> dict:
    sdir = out_dir / name
    sdir.mkdir(exist_ok=True)
    image_paths = []
    for ci in range(sample.images.shape[0]):
        rel = f"{name}/cam_{ci:02d}.ppm"
        fileio.write_ppm(out_dir / rel, sample.images[ci])
        image_paths.append(rel)
    fileio.write_occgrid(sdir / "labels.occgrid", sample.occupancy,
                         N_CLASSES)
    fileio.write_boxes_json(sdir / "boxes.json", sample.boxes)
    return {"name": name, "seed": sample.seed, "images": image_paths,
            "labels": f"{name}/labels.occgrid",
            "boxes": f"{name}/boxes.json"}


def load_dataset(data_dir) -> tuple[list[Sample], SceneSpec]:
    """Rebuild Sample objects from a generated directory."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.is_file():
        raise ContractViolation(f"no manifest.json under {data_dir}")
    manifest = fileio.read_json(manifest_path)
    spec = SceneSpec.from_dict(manifest["spec"])
    entries = manifest["samples"]
    if not entries:
        raise ContractViolation(f"dataset {data_dir} is empty")
    rig = fileio.read_rig_json(data_dir / "rig.json")
    ground = ground_box_for(spec.grid)
    samples = []
    for e in entries:
        images = np.stack([fileio.read_ppm(data_dir / p)
                           for p in e["images"]])
        labels, _ = fileio.read_occgrid(data_dir / e["labels"])
        boxes = fileio.read_boxes_json(data_dir / e["boxes"])
        samples.append(Sample(images=images, rig=rig, occupancy=labels,
                              boxes=boxes, ground_box=ground,
                              grid=spec.grid, seed=int(e["seed"])))
    return samples, spec


def _load_config(args) -> RunConfig:
    """--config file, else config.json next to the checkpoint, else defaults."""
    if getattr(args, "config", None):
        config = RunConfig.from_json(args.config)
    else:
        sidecar = None
        if getattr(args, "ckpt", None):
            cand = Path(args.ckpt).parent / "config.json"
            if cand.is_file():
                sidecar = cand
        config = RunConfig.from_json(sidecar) if sidecar else RunConfig()
    if args.seed_override is not None:
        config = replace(config, seed=args.seed_override)
    return config


def _check_data_compatible(config: RunConfig, samples: list[Sample],
                           spec: SceneSpec):
    if config.grid != spec.grid:
        raise ContractViolation(
            f"config grid {config.grid.dims} over "
            f"[{config.grid.x_min},{config.grid.x_max}] does not match "
            f"dataset grid {spec.grid.dims}")
    n_cams, _, h, w = samples[0].images.shape
    if (n_cams, h, w) != (config.n_cameras, config.image_height,
                          config.image_width):
        raise ContractViolation(
            f"config expects {config.n_cameras} cameras at "
            f"{config.image_height}x{config.image_width}, dataset has "
            f"{n_cams} at {h}x{w}")


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    if args.count < 0:
        raise ContractViolation("gen: count must be >= 0")
    spec = SceneSpec.from_dict(fileio.read_json(args.spec)) if args.spec \
        else SceneSpec()
    if args.seed_override is not None:
        spec = replace(spec, seed=args.seed_override)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        sample = generate(spec, seed=spec.seed + i)
        if i == 0:
            fileio.write_rig_json(out / "rig.json", sample.rig)
        entries.append(_write_sample(out, f"sample_{i:04d}", sample))
    manifest = {"base_seed": spec.seed, "count": args.count,
                "spec": spec.to_dict(), "samples": entries}
    fileio.write_json(out / "manifest.json", manifest)
    print(f"wrote {args.count} sample(s) under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    samples, spec = load_dataset(args.data)
    _check_data_compatible(config, samples, spec)
    result = train(config, samples, args.out, steps=args.steps,
                   quiet=args.quiet)
    print(f"trained {result.steps} step(s), final loss "
          f"{result.final_loss:.6f}, checkpoint {result.checkpoint_path}")
    return EXIT_OK


def _parse_ranges(text) -> tuple:
    if text is None:
        return ()
    try:
        radii = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ContractViolation(f"eval: bad --ranges value {text!r}")
    if not radii or any(r <= 0 for r in radii):
        raise ContractViolation("eval: ranges must be positive numbers")
    return radii


def cmd_eval(args) -> int:
    if not args.oracle_pred and not args.ckpt:
        raise ContractViolation("eval: --ckpt required unless --oracle-pred")
    samples, spec = load_dataset(args.data)
    if args.oracle_pred and not (args.config or args.ckpt):
        # no model involved, so shape the config after the dataset itself
        config = replace(RunConfig(), grid=spec.grid,
                         n_cameras=spec.n_cameras,
                         image_height=spec.image_height,
                         image_width=spec.image_width)
    else:
        config = _load_config(args)
    _check_data_compatible(config, samples, spec)
    result = evaluate(config, samples, args.ckpt,
                      radii=_parse_ranges(args.ranges),
                      include_free=args.include_free,
                      oracle_pred=args.oracle_pred)
    names = CLASS_NAMES if config.n_classes == len(CLASS_NAMES) else None
    print(f"overall ({result.n_scenes} scene(s), "
          f"{result.report.n_voxels} voxels):", file=sys.stderr)
    print(result.report.table(names), file=sys.stderr)
    for radius, rep in result.per_range:
        print(f"range <= {radius:g} m: mIoU {rep.miou:.4f}, "
              f"scene IoU {rep.scene_iou:.4f}", file=sys.stderr)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    doc = result.to_dict()
    if args.out:
        fileio.write_json(args.out, doc)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_check(args) -> int:
    seed = args.seed_override if args.seed_override is not None else 0
    names = list(checks.SUITES) if args.suite == "all" else [args.suite]
    results = []
    for name in names:
        results.extend(checks.run_suite(name, seed=seed))
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.suite}/{r.name}: "
              f"{r.detail}")
    failures = [r.to_dict() for r in results if not r.passed]
    summary = {"seed": seed, "suites": names, "checks": len(results),
               "failures": failures, "passed": not failures}
    if args.out:
        fileio.write_json(args.out, summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if not failures else EXIT_FAILURE


def cmd_export(args) -> int:
    sdir = Path(args.sample)
    if not sdir.is_dir():
        raise ContractViolation(f"export: {sdir} is not a sample directory")
    root = sdir.parent
    manifest = fileio.read_json(root / "manifest.json")
    entry = next((e for e in manifest["samples"] if e["name"] == sdir.name),
                 None)
    if entry is None:
        raise ContractViolation(f"export: {sdir.name} not in the manifest")
    spec = SceneSpec.from_dict(manifest["spec"])
    config = _load_config(args)
    if config.grid != spec.grid:
        raise ContractViolation(
            f"export: config grid {config.grid.dims} does not match "
            f"dataset grid {spec.grid.dims}")
    rig = fileio.read_rig_json(root / "rig.json")
    images = np.stack([fileio.read_ppm(root / p) for p in entry["images"]])
    model = OccupancyModel(config)
    model.load_state_dict(fileio.read_checkpoint(args.ckpt))
    vt = build_or_load_vt(config, rig)
    pred = model.predict_labels(images, vt, rig)
    if pred.max(initial=0) >= config.n_classes:
        raise NumericError("export", "predicted label exceeds class count")
    fileio.write_occgrid(args.out, pred.astype(np.uint8), config.n_classes)
    print(f"wrote {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxocc",
        description="surround-camera occupancy model, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic scenes")
    p.add_argument("--spec", help="scene spec JSON (defaults used if absent)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True,
                   help="number of scenes")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--steps", type=int, default=None,
                   help="override config step count")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", help="checkpoint path")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ranges", default=None,
                   help="comma-separated range radii in meters")
    p.add_argument("--include-free", action="store_true",
                   help="count the free class in the mean")
    p.add_argument("--oracle-pred", action="store_true",
                   help="score the labels against themselves")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run verification suites")
    p.add_argument("--suite", default="all",
                   choices=sorted(checks.SUITES) + ["all"])
    p.add_argument("--out", help="also write the JSON summary here")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("export", help="run inference, write a label grid")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--sample", required=True,
                   help="sample directory inside a generated dataset")
    p.add_argument("--out", required=True, help=".occgrid output path")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    env_seed = os.environ.get("OCCU_SEED")
    if env_seed is None:
        args.seed_override = None
    else:
        try:
            args.seed_override = int(env_seed)
        except ValueError:
            print(f"error: OCCU_SEED must be an integer, got {env_seed!r}",
                  file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except (NumericError, GradientError) as e:
        print(f"failure: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except (ContractViolation, CheckpointError, json.JSONDecodeError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

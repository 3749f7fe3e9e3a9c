"""Command-line interface: synth, train, eval, study, render, bench.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical
failure. Config precedence for `train`: built-in defaults < config file
(flat key=value lines) < command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import asdict, fields as dc_fields
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import generate_synthetic_scene, load_dataset, save_dataset
from .errors import CosplatError, DatasetError, FieldFormatError, RenderError, TrainingDiverged
from .fieldio import load_field, save_field, save_image_png, save_image_raw
from .metrics import disagreement_study, evaluate
from .rasterizer import available_kernels, render, render_backward
from .training import TrainConfig, train

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    pass


def _parse_resolution(text: str):
    if "x" in text:
        w, h = text.lower().split("x", 1)
        return int(w), int(h)
    v = int(text)
    return v, v


def cmd_synth(args) -> int:
    if args.train_views < 2:
        raise UsageError("--train-views must be at least 2 (pseudo views need a pair)")
    dataset = generate_synthetic_scene(
        seed=args.seed,
        n_gaussians=args.gaussians,
        n_train=args.train_views,
        n_test=args.test_views,
        resolution=_parse_resolution(args.res),
        arc_deg=args.arc_deg,
        threads=args.threads,
    )
    save_dataset(dataset, args.out, force=args.force)
    print(f"wrote dataset to {args.out}: {dataset.n_train} train / {dataset.n_test} test views")
    return 0


def _load_config_file(path: Path) -> dict:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected key=value")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return values


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(field_type, name: str, text: str):
    if field_type is bool:
        low = text.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise UsageError(f"config key {name}: cannot parse boolean {text!r}")
    if field_type is int:
        return int(text)
    if field_type is float:
        return float(text)
    if field_type is tuple:
        return tuple(float(v) for v in text.split(","))
    return text


def build_train_config(args) -> TrainConfig:
    values = {}
    type_by_name = {f.name: f.type for f in dc_fields(TrainConfig)}
    py_types = {"int": int, "float": float, "bool": bool, "tuple": tuple, "str": str}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DatasetError(f"config file {path} not found")
        for key, text in _load_config_file(path).items():
            if key not in type_by_name:
                raise UsageError(f"unknown config key {key!r}")
            ftype = py_types.get(type_by_name[key], str)
            values[key] = _coerce(ftype, key, text)

    # An explicit --mode beats config-file co-regularization switches.
    mode = args.mode or "corgs"
    if args.mode is not None:
        values.pop("co_prune", None)
        values.pop("pseudo_views", None)
    flag_overrides = {
        "n_fields": args.fields,
        "seed": args.seed,
        "iterations": args.iterations,
        "threads": args.threads,
        "tau_rel": args.tau_rel,
        "tau": args.tau_absolute,
    }
    for key, val in flag_overrides.items():
        if val is not None:
            values[key] = val
    config = TrainConfig.mode(mode, **values)
    config.validate()
    return config


def _hash_directory(path: Path) -> str:
    digest = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    dataset = load_dataset(data_dir)
    config = build_train_config(args)

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)

    manifest = {
        "format": "cosplat-manifest",
        "version": 1,
        "tool_version": __version__,
        "command": "train",
        "mode": args.mode or "corgs",
        "seed": config.seed,
        "config": asdict(config),
        "dataset": {"path": str(data_dir), "sha256": _hash_directory(data_dir)},
        "outputs": {
            "fields": [f"field_{i}.bin" for i in range(config.n_fields)],
            "log": "log.csv",
        },
        "timings": {},
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    start = time.perf_counter()
    result = train(dataset, config)
    elapsed = time.perf_counter() - start

    for i, field in enumerate(result.fields):
        save_field(field, out / f"field_{i}.bin")
    result.log.save(out / "log.csv")
    manifest["timings"] = {"train_seconds": elapsed}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    counts = ", ".join(str(f.count) for f in result.fields)
    print(f"trained {config.n_fields} field(s) [{counts} primitives] in {elapsed:.1f}s -> {out}")
    return 0


EVAL_SCHEMA_COMMENT = "# cosplat-eval-v1"
STUDY_SCHEMA_COMMENT = "# cosplat-study-v1"


def cmd_eval(args) -> int:
    dataset = load_dataset(Path(args.data))
    field = load_field(Path(args.field))
    if args.point_metrics and dataset.ground_truth_field is None:
        raise DatasetError(
            "point metrics (fitness/rmse) requested but the dataset has no ground-truth field"
        )
    summary = evaluate(field, dataset, threads=args.threads)
    rows = [["view", "psnr", "ssim", "abs_error_rel"]]
    for r in summary.rows:
        rows.append([r.view_id, f"{r.psnr:.9g}", f"{r.ssim:.9g}", f"{r.abs_rel:.9g}"])
    rows.append(
        ["mean", f"{summary.mean_psnr:.9g}", f"{summary.mean_ssim:.9g}", f"{summary.mean_abs_rel:.9g}"]
    )
    if dataset.ground_truth_field is not None:
        rows.append(["fitness_vs_gt", f"{summary.fitness:.9g}", "", ""])
        rows.append(["rmse_vs_gt", f"{summary.rmse:.9g}", "", ""])
    _write_csv(Path(args.out), EVAL_SCHEMA_COMMENT, rows)
    print(f"eval: mean PSNR {summary.mean_psnr:.2f} dB, mean SSIM {summary.mean_ssim:.4f} -> {args.out}")
    return 0


def cmd_study(args) -> int:
    dataset = load_dataset(Path(args.data))
    field_a = load_field(Path(args.field_a))
    field_b = load_field(Path(args.field_b))
    percentiles = [int(p) for p in args.percentiles.split(",")]
    gt_images = [img.data for img in dataset.test_images]
    gt_depths = [d.data for d in dataset.test_depths] if dataset.test_depths else None
    rows_out = disagreement_study(
        field_a, field_b, gt_images, dataset.test_cameras,
        percentiles=percentiles, score=args.score, gt_depths=gt_depths,
        threads=args.threads,
    )
    rows = [["view", "percentile", "n_masked", "psnr_a", "psnr_b", "psnr_mean", "abs_rel_a", "abs_rel_b"]]
    for r in rows_out:
        rows.append(
            [r.view_id, r.percentile, r.n_masked,
             f"{r.psnr_a:.9g}", f"{r.psnr_b:.9g}", f"{r.psnr_mean:.9g}",
             f"{r.abs_rel_a:.9g}", f"{r.abs_rel_b:.9g}"]
        )
    _write_csv(Path(args.out), STUDY_SCHEMA_COMMENT, rows)
    print(f"study: {len(rows_out)} rows -> {args.out}")
    return 0


def cmd_render(args) -> int:
    dataset = load_dataset(Path(args.data))
    field = load_field(Path(args.field))
    split, _, idx_text = args.view.partition(":")
    try:
        idx = int(idx_text)
        cams = {"train": dataset.train_cameras, "test": dataset.test_cameras}[split]
        cam = cams[idx]
    except (ValueError, KeyError, IndexError) as exc:
        raise UsageError(f"bad --view {args.view!r} (expected train:N or test:N)") from exc
    out = render(field, cam, threads=args.threads)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_image_png(out.color, prefix.with_suffix(".png"))
    save_image_raw(out.depth, Path(str(prefix) + "_depth.raw"))
    save_image_raw(out.color, Path(str(prefix) + "_color.raw"))
    print(f"rendered {args.view} -> {prefix}.png (+ raw color/depth)")
    return 0


def cmd_bench(args) -> int:
    backends = available_kernels()
    dataset = generate_synthetic_scene(
        seed=args.seed, n_gaussians=args.gaussians, n_train=2, n_test=0,
        resolution=_parse_resolution(args.res),
    )
    field = dataset.ground_truth_field
    cam = dataset.train_cameras[0]
    grad = np.full((cam.height, cam.width, 3), 1.0 / (cam.height * cam.width * 3))
    print(f"benchmark: {field.count} gaussians at {cam.width}x{cam.height}, "
          f"{args.repeat} repeats, threads={args.threads}")
    results = {}
    for name, kernels in backends.items():
        fwd_times, bwd_times = [], []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            out = render(field, cam, kernels=kernels, threads=args.threads)
            t1 = time.perf_counter()
            render_backward(field, cam, out, grad, kernels=kernels, threads=args.threads)
            t2 = time.perf_counter()
            fwd_times.append(t1 - t0)
            bwd_times.append(t2 - t1)
        results[name] = (min(fwd_times), min(bwd_times))
        print(f"  {name:>8}: forward {min(fwd_times)*1e3:8.2f} ms   backward {min(bwd_times)*1e3:8.2f} ms")
    if "python" in results and "compiled" in results:
        f_ratio = results["python"][0] / results["compiled"][0]
        b_ratio = results["python"][1] / results["compiled"][1]
        print(f"  speedup (python/compiled): forward {f_ratio:.1f}x, backward {b_ratio:.1f}x")
    return 0


def _write_csv(path: Path, schema_comment: str, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(schema_comment + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cosplat", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussians", type=int, default=50)
    p.add_argument("--train-views", type=int, default=3)
    p.add_argument("--test-views", type=int, default=4)
    p.add_argument("--res", default="64")
    p.add_argument("--arc-deg", type=float, default=360.0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one or more fields")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["baseline", "copruning", "pseudoview", "corgs"], default=None,
                   help="co-regularization preset (default corgs)")
    p.add_argument("--fields", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--tau-rel", type=float, default=None)
    p.add_argument("--tau-absolute", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained field against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--point-metrics", action="store_true",
                   help="require fitness/rmse against the ground-truth field")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("study", help="disagreement-masking correlation study")
    p.add_argument("--data", required=True)
    p.add_argument("--field-a", required=True)
    p.add_argument("--field-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--percentiles", default="0,10,20,30,40,50,60,70,80,90")
    p.add_argument("--score", choices=["color", "depth"], default="color")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("render", help="render a trained field at a dataset view")
    p.add_argument("--data", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--view", required=True, help="train:N or test:N")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="compare kernel backends")
    p.add_argument("--gaussians", type=int, default=2000)
    p.add_argument("--res", default="64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FieldFormatError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, RenderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CosplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

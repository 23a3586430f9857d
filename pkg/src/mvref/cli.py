"""Command line entry points: generate, train, eval, infer, ablate.

Every command exits 0 on success; failures print a single
``category: message`` line to stderr and exit nonzero so scripts can
branch on the category.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .dataset import (
    CORRUPTION_PRESETS,
    DatasetError,
    DiskDataset,
    SplitProvider,
    generate_dataset,
    read_view,
)
from .geometry import GeometryError
from .metrics import MetricsError, evaluate, MetricsReport, report_table
from .net import ModelConfig, ModelError, load_checkpoint, make_bundle, refine
from .scene import SceneError
from .train import TrainConfig, TrainError, train_loop

ABLATION_VARIANTS = {
    "baseline": ("none", False),
    "average": ("average", False),
    "average+fsr": ("average", True),
    "attention": ("attention", False),
    "attention+fsr": ("attention", True),
}


def cmd_generate(args) -> int:
    if args.corruption not in CORRUPTION_PRESETS:
        raise DatasetError(f"unknown corruption preset {args.corruption!r}")
    manifest = generate_dataset(
        args.out, seed=args.seed, n_locations=args.locations,
        corruption=CORRUPTION_PRESETS[args.corruption], augments=args.augments,
        width=args.width, height=args.height, n_boxes=args.boxes, n_walls=args.walls,
    )
    print(f"generated {manifest.n_locations} locations x "
          f"{manifest.views_per_location} views at {args.out}")
    return 0


def _load_run_configs(config_path):
    raw = json.loads(Path(config_path).read_text())
    if not isinstance(raw, dict):
        raise TrainError("config file must hold a JSON object")
    model = {**ModelConfig().to_dict(), **raw.get("model", {})}
    train = {**TrainConfig().to_dict(), **raw.get("train", {})}
    return ModelConfig.from_dict(model), TrainConfig.from_dict(train)


def cmd_train(args) -> int:
    model_config, train_config = _load_run_configs(args.config)
    provider = SplitProvider(DiskDataset(args.data), cache=not args.no_cache)
    result = train_loop(provider, model_config, train_config,
                        out_dir=args.out, resume=args.resume)
    best = result["best_imae"]
    print(f"trained {train_config.total_steps} steps"
          + (f", best validation iMAE {best:.6f}" if best is not None else ""))
    return 0


def _checkpoint_model(ckpt_path):
    params, _, meta = load_checkpoint(ckpt_path)
    if "model_config" not in meta:
        raise ModelError(f"{ckpt_path} misses model_config metadata")
    return params, ModelConfig.from_dict(meta["model_config"])


def cmd_eval(args) -> int:
    _kernels.set_backend("numpy")  # bit-reproducible forward pass
    dataset = DiskDataset(args.data)
    params, model_config = _checkpoint_model(args.ckpt)
    reports = evaluate(dataset.pairs(args.split), params, model_config)
    table = report_table(reports)
    out_dir = Path(args.out) if args.out else Path(args.ckpt).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"metrics_{args.split}.txt").write_text(table)
    payload = {
        "split": args.split,
        "checkpoint": str(args.ckpt),
        "input": reports["input"].to_dict(),
        "refined": reports["refined"].to_dict(),
    }
    (out_dir / f"metrics_{args.split}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(table, end="")
    return 0


def _bundle_from_view_dirs(view_dirs):
    views, hqs = [], []
    for d in view_dirs:
        view, hq = read_view(d)
        views.append(view)
        hqs.append(hq)
    bundle = make_bundle(
        np.stack([v.idepth for v in views]),
        np.stack([v.color for v in views]),
        np.stack([v.normals for v in views]),
        np.stack([v.area for v in views]),
        np.stack([v.tri_id for v in views]),
        views[0].intrinsics,
        tuple(v.pose for v in views),
    )
    return bundle, np.stack(hqs)


def _preview(plane: np.ndarray, scale: float) -> "np.ndarray":
    return np.clip(plane / scale * 255.0, 0.0, 255.0).astype(np.uint8)


def cmd_infer(args) -> int:
    from PIL import Image

    _kernels.set_backend("numpy")  # bit-reproducible forward pass
    params, model_config = _checkpoint_model(args.ckpt)
    root = Path(args.view)
    if (root / "meta.json").is_file():
        view_dirs = [root]
    else:
        view_dirs = sorted(d for d in root.iterdir()
                           if d.is_dir() and (d / "meta.json").is_file())
    if not view_dirs:
        raise DatasetError(f"{root} holds no view directories")
    bundle, _ = _bundle_from_view_dirs(view_dirs)
    refined = refine(bundle, params, model_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scale = float(max(refined.max(), bundle.idepth_lq.max(), 1e-6))
    for t, view_dir in enumerate(view_dirs):
        sub = out / view_dir.name
        sub.mkdir(exist_ok=True)
        (sub / "idepth_refined.f32").write_bytes(
            np.ascontiguousarray(refined[t], dtype="<f4").tobytes())
        Image.fromarray(_preview(refined[t], scale), mode="L").save(
            sub / "preview_refined.png")
        Image.fromarray(_preview(bundle.idepth_lq[t], scale), mode="L").save(
            sub / "preview_input.png")
    meta = {"preview_scale": scale, "views": [d.name for d in view_dirs],
            "checkpoint": str(args.ckpt)}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"refined {len(view_dirs)} views into {out}")
    return 0


def _median_report(reports) -> MetricsReport:
    return MetricsReport(
        delta={t: float(np.median([r.delta[t] for r in reports]))
               for t in reports[0].delta},
        imae=float(np.median([r.imae for r in reports])),
        irmse=float(np.median([r.irmse for r in reports])),
        n_pixels=int(np.median([r.n_pixels for r in reports])),
    )


def _run_ablation_variant(dataset, variant, seed, args, run_dir) -> dict:
    """Train (or resume) one variant/seed and evaluate it on the test split."""
    agg, fsr = ABLATION_VARIANTS[variant]
    model_config = ModelConfig(base_width=args.base_width, aggregation=agg,
                               feature_transform=fsr)
    train_config = TrainConfig(total_steps=args.steps, seed=seed,
                               batch_locations=args.batch_locations,
                               val_interval=args.val_interval)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics_test.json"
    latest = run_dir / "checkpoint_latest.ckpt"
    resume = None
    if latest.is_file():
        _, _, meta = load_checkpoint(latest)
        if meta["step"] < args.steps:
            resume = latest
        elif metrics_path.is_file():  # finished run: reuse its evaluation
            return json.loads(metrics_path.read_text())
    if resume is not None or not latest.is_file():
        provider = SplitProvider(dataset, cache=not args.no_cache)
        train_loop(provider, model_config, train_config, out_dir=run_dir, resume=resume)
    best = run_dir / "checkpoint_best.ckpt"
    params, model_config = _checkpoint_model(best if best.is_file() else latest)
    reports = evaluate(dataset.pairs("test"), params, model_config)
    payload = {"variant": variant, "seed": seed,
               "input": reports["input"].to_dict(),
               "refined": reports["refined"].to_dict()}
    metrics_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def cmd_ablate(args) -> int:
    _kernels.set_backend("numpy")  # bit-reproducible training and evaluation
    dataset = DiskDataset(args.data)
    variants = args.variants.split(",")
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise TrainError(f"unknown ablation variant {v!r}")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, rows = {}, {}
    for variant in variants:
        per_seed = []
        for seed in seeds:
            run_dir = out / f"{variant.replace('+', '_')}_s{seed}"
            payload = _run_ablation_variant(dataset, variant, seed, args, run_dir)
            per_seed.append(payload)
            rows.setdefault("unrefined", MetricsReport.from_dict(payload["input"]))
        results[variant] = per_seed
        rows[variant] = _median_report(
            [MetricsReport.from_dict(p["refined"]) for p in per_seed])
    table = report_table(rows)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(json.dumps(
        {"seeds": seeds, "steps": args.steps, "runs": results},
        indent=2, sort_keys=True) + "\n")
    print(table, end="")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvref", description="Multi-view refinement of rendered inverse-depth")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--locations", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corruption", default="moderate",
                   choices=sorted(CORRUPTION_PRESETS))
    p.add_argument("--augments", type=int, default=3)
    p.add_argument("--width", type=int, default=288)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--boxes", type=int, default=None)
    p.add_argument("--walls", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a refinement model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="JSON with 'model'/'train' sections")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="refine one view bundle directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--view", required=True,
                   help="a view directory, or a location directory of views")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train and compare aggregation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=10000)
    p.add_argument("--seeds", default="0")
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--batch-locations", type=int, default=4)
    p.add_argument("--val-interval", type=int, default=500)
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


_ERROR_CATEGORIES = (
    (DatasetError, "dataset-error"),
    (TrainError, "train-error"),
    (ModelError, "model-error"),
    (MetricsError, "metrics-error"),
    (SceneError, "scene-error"),
    (GeometryError, "geometry-error"),
    (FileNotFoundError, "io-error"),
    (OSError, "io-error"),
    (ValueError, "config-error"),
)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tuple(e for e, _ in _ERROR_CATEGORIES) as err:
        category = next(c for e, c in _ERROR_CATEGORIES if isinstance(err, e))
        message = str(err).splitlines()[0] if str(err) else err.__class__.__name__
        print(f"{category}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

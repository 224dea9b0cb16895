"""Command-line interface.

Subcommands: render, sample, score, train, evaluate, sweep-n, ablate, bench.
Every command prints one JSON document with the full effective configuration
echoed into it, so any output is reproducible from the document alone.  When
--seed is omitted, a seed is drawn from entropy and announced on stderr.

Exit codes: 0 success, 1 pipeline failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

from .bench import bench_table, compare_report, time_pipeline
from .errors import ConfigError, ProjQAError, RenderError, SamplingError
from .evaluation import read_dataset_manifest, report_table as eval_table
from .features import (
    BASELINE_DIM,
    BASELINE_EXTRACTOR_ID,
    ExtractorSpec,
    write_manifest,
)
from .pipeline import (
    PRESETS,
    PipelineConfig,
    ablate,
    cross_validate,
    dataset_features,
    load_model,
    run_scoring,
    sample_for_model,
    sweep_n,
)
from .projection import (
    RenderConfig,
    VIEWPOINTS,
    ViewpointId,
    crop_background,
    export_projection,
    render_selected,
)
from .sampling import GridSpec, Rng
from .scoring import TrainConfig, fit_head, init_head, load_weights, save_weights


def _require_file(path, what: str = "file") -> Path:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _parse_grid(text: str) -> GridSpec:
    m = re.fullmatch(r"(\d+)x(\d+)x(\d+)", text.strip().lower())
    if not m:
        raise ConfigError(f"--grid must look like 7x7x32, got {text!r}")
    try:
        return GridSpec(*(int(g) for g in m.groups()))
    except SamplingError as exc:
        raise ConfigError(str(exc))


def _parse_viewpoints(text: str) -> tuple[ViewpointId, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("viewpoint list is empty")
    try:
        return tuple(ViewpointId.from_string(p) for p in parts)
    except RenderError as exc:
        raise ConfigError(str(exc))


def _backend_command(backend_dir) -> tuple[str, ...]:
    if backend_dir is None:
        raise ConfigError("--extractor bridge requires --backend-dir")
    shim = Path(backend_dir) / "backend_cli.py"
    if not shim.is_file():
        raise ConfigError(f"backend_cli.py not found in {backend_dir}")
    return (sys.executable, str(shim))


def _effective_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = int.from_bytes(os.urandom(8), "little")
    print(f"seed: {seed} (drawn from entropy; pass --seed to reproduce)",
          file=sys.stderr)
    return seed


def _config_from_args(args, **overrides) -> PipelineConfig:
    seed = _effective_seed(args)
    grid = _parse_grid(args.grid) if args.grid else GridSpec()
    render_kwargs = {}
    if args.viewport is not None:
        render_kwargs["viewport"] = args.viewport
    if args.splat is not None:
        render_kwargs["splat_radius"] = args.splat
    try:
        render = RenderConfig(**render_kwargs)
    except RenderError as exc:
        raise ConfigError(str(exc))
    if args.extractor == "bridge":
        extractor = ExtractorSpec("bridge", _backend_command(args.backend_dir))
    else:
        extractor = ExtractorSpec("baseline")
    n = args.n if args.n is not None else PRESETS[args.preset]
    kwargs = dict(
        n_projections=n,
        grid=grid,
        render=render,
        extractor=extractor,
        weights_path=None if args.weights is None else Path(args.weights),
        seed=seed,
        jobs=args.jobs,
        bridge_scores=getattr(args, "bridge_scores", False),
    )
    kwargs.update(overrides)
    return PipelineConfig(**kwargs)


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        hidden=args.hidden,
        seed=seed,
        loss_on=args.loss_on,
    )


def _emit(doc: dict, args) -> None:
    text = json.dumps(doc, indent=2)
    out = getattr(args, "out", None)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
        print(f"wrote {out}", file=sys.stderr)
    else:
        print(text)


def _load_head(args, cfg: PipelineConfig):
    if cfg.bridge_scores:
        return None
    if cfg.weights_path is None:
        raise ConfigError("scoring requires --weights (or --bridge-scores)")
    if not cfg.weights_path.is_file():
        raise ConfigError(f"weights not found: {cfg.weights_path}")
    return load_weights(cfg.weights_path)


def cmd_render(args) -> int:
    cfg = _config_from_args(args)
    model_path = _require_file(args.model, "model")
    viewpoints = (
        _parse_viewpoints(args.viewpoints) if args.viewpoints else tuple(VIEWPOINTS)
    )
    if len(set(viewpoints)) != len(viewpoints):
        raise ConfigError("viewpoints must be distinct")
    model = load_model(model_path)
    out_dir = Path(args.out or "renders")
    out_dir.mkdir(parents=True, exist_ok=True)
    projections = render_selected(model, viewpoints, cfg.render)
    outputs = []
    for proj in projections:
        tag = proj.viewpoint.value.replace("+", "p").replace("-", "m")
        png = export_projection(proj, out_dir / f"{model_path.stem}_{tag}.png", cfg.render)
        outputs.append(str(png))
    print(json.dumps({"outputs": outputs, "config": cfg.to_dict()}, indent=2))
    return 0


def cmd_sample(args) -> int:
    cfg = _config_from_args(args)
    model_path = _require_file(args.model, "model")
    sampled = sample_for_model(model_path, cfg, Rng(cfg.seed))
    out_dir = Path(args.out or "sampled")
    manifest = write_manifest(sampled, out_dir)
    doc = {
        "manifest": str(manifest),
        "viewpoints": [vp.value for vp in sampled.viewpoints],
        "config": cfg.to_dict(),
    }
    print(json.dumps(doc, indent=2))
    return 0


def cmd_score(args) -> int:
    cfg = _config_from_args(args)
    model_path = _require_file(args.model, "model")
    weights = _load_head(args, cfg)
    result = run_scoring(model_path, cfg, weights)
    _emit({**result.to_dict(), "config": cfg.to_dict()}, args)
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    manifest = _require_file(args.dataset, "dataset manifest")
    items = read_dataset_manifest(manifest)
    train_cfg = _train_config(args, cfg.seed)
    features = dataset_features(items, cfg)
    labels = {it.item_id: it.mos for it in items}

    val_ids: list[str] = []
    train_ids = [it.item_id for it in items]
    if args.val_groups > 0:
        groups = []
        for it in items:
            if it.group_id not in groups:
                groups.append(it.group_id)
        if args.val_groups >= len(groups):
            raise ConfigError(
                f"--val-groups {args.val_groups} must leave at least one "
                f"training group (dataset has {len(groups)})"
            )
        perm = Rng(cfg.seed).permutation(len(groups))
        held = {groups[i] for i in perm[: args.val_groups]}
        val_ids = [it.item_id for it in items if it.group_id in held]
        train_ids = [it.item_id for it in items if it.group_id not in held]

    def pack(ids):
        return [(features[i], labels[i]) for i in ids]

    result = fit_head(pack(train_ids), train_cfg, pack(val_ids) if val_ids else None)
    out = Path(args.out or "weights.json")
    save_weights(result.weights, out)
    doc = {
        "weights": str(out),
        "train_items": len(train_ids),
        "val_items": len(val_ids),
        "epochs": train_cfg.epochs,
        "batch_size": train_cfg.batch_size,
        "lr": train_cfg.lr,
        "final_train_loss": result.train_losses[-1],
        "best_epoch": result.best_epoch,
        "config": cfg.to_dict(),
    }
    if result.val_losses:
        doc["best_val_loss"] = min(result.val_losses)
    print(json.dumps(doc, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    manifest = _require_file(args.dataset, "dataset manifest")
    items = read_dataset_manifest(manifest)
    train_cfg = _train_config(args, cfg.seed)
    features = dataset_features(items, cfg)
    cv = cross_validate(items, features, args.k, cfg.seed, train_cfg)
    if args.format == "table":
        rows = {f"fold{i}": r for i, r in enumerate(cv.fold_reports)}
        rows["mean"] = cv.aggregate
        print(eval_table(rows))
        return 0
    doc = {
        "k": args.k,
        "aggregate": cv.aggregate.to_dict(),
        "folds": [r.to_dict() for r in cv.fold_reports],
        "predictions": cv.predictions,
        "config": cfg.to_dict(),
    }
    _emit(doc, args)
    return 0


def cmd_sweep_n(args) -> int:
    cfg = _config_from_args(args)
    manifest = _require_file(args.dataset, "dataset manifest")
    items = read_dataset_manifest(manifest)
    train_cfg = _train_config(args, cfg.seed)
    results = sweep_n(items, cfg, args.k, train_cfg)
    if args.format == "table":
        print(eval_table({f"N={n}": res.aggregate for n, res in results.items()}))
        return 0
    doc = {
        "k": args.k,
        "rows": [
            {"n_projections": n, **res.aggregate.to_dict()}
            for n, res in results.items()
        ],
        "config": cfg.to_dict(),
    }
    _emit(doc, args)
    return 0


_MODE_FLAGS = {"on": (True,), "off": (False,), "both": (True, False)}


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    manifest = _require_file(args.dataset, "dataset manifest")
    items = read_dataset_manifest(manifest)
    train_cfg = _train_config(args, cfg.seed)
    fixed_sets = None
    if args.fixed_viewpoints is not None:
        fixed_sets = [_parse_viewpoints(args.fixed_viewpoints)]
    rows = ablate(
        items,
        cfg,
        args.k,
        train_cfg,
        fixed_sets=fixed_sets,
        rps_modes=_MODE_FLAGS[args.rps],
        gms_modes=_MODE_FLAGS[args.gms],
    )
    if args.format == "table":
        print(eval_table(rows))
        return 0
    doc = {
        "k": args.k,
        "rows": {label: rep.to_dict() for label, rep in rows.items()},
        "config": cfg.to_dict(),
    }
    _emit(doc, args)
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    model_path = _require_file(args.model, "model")
    preset_names = [p.strip() for p in args.presets.split(",") if p.strip()]
    for name in preset_names:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r} in --presets")
    if not preset_names:
        raise ConfigError("--presets gave no presets")

    if cfg.weights_path is not None:
        weights = _load_head(args, cfg)
    elif cfg.bridge_scores:
        weights = None
    elif cfg.extractor.kind == "baseline":
        weights = init_head(BASELINE_DIM, 128, Rng(cfg.seed), BASELINE_EXTRACTOR_ID)
    else:
        raise ConfigError("bench with a bridge feature extractor requires --weights")

    timings = [
        time_pipeline(
            model_path,
            replace(cfg, n_projections=PRESETS[name]),
            repeats=args.repeats,
            weights=weights,
            label=name,
        )
        for name in preset_names
    ]
    if len(timings) == 1:
        t = timings[0]
        doc = {"rows": [{**t.to_dict(), "ratio": 1.0}], "config": cfg.to_dict()}
        _emit(doc, args)
        return 0
    report = compare_report(timings, baseline=0)
    if args.format == "table":
        print(bench_table(report))
        return 0
    doc = {
        "baseline": report.baseline_label,
        "rows": report.rows,
        "config": cfg.to_dict(),
    }
    _emit(doc, args)
    return 0


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=None,
                     help="64-bit seed; drawn from entropy (and printed) if omitted")
    sub.add_argument("--preset", choices=sorted(PRESETS), default="base",
                     help="projection-count preset: tiny=2, base=5")
    sub.add_argument("--n", type=int, default=None,
                     help="explicit projection count 1..6 (overrides --preset)")
    sub.add_argument("--grid", default=None, metavar="RxCxP",
                     help="grid rows x cols x patch, e.g. 7x7x32")
    sub.add_argument("--viewport", type=int, default=None,
                     help="square render viewport in pixels")
    sub.add_argument("--splat", type=int, default=None,
                     help="point splat radius in pixels")
    sub.add_argument("--extractor", choices=("baseline", "bridge"),
                     default="baseline")
    sub.add_argument("--backend-dir", default=None,
                     help="directory containing the bridge backend's backend_cli.py")
    sub.add_argument("--weights", default=None, help="head weights JSON path")
    sub.add_argument("--jobs", type=int, default=1,
                     help="worker parallelism across models")
    sub.add_argument("--out", default=None,
                     help="output file (or directory for render/sample)")


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--epochs", type=int, default=50)
    sub.add_argument("--batch-size", type=int, default=32)
    sub.add_argument("--lr", type=float, default=1e-4)
    sub.add_argument("--hidden", type=int, default=128)
    sub.add_argument("--loss-on", choices=("average", "projection"),
                     default="average",
                     help="regress the per-item mean score (default) or every "
                          "projection score against the label")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="projqa",
        description="Projection-based no-reference quality assessment for "
                    "colored point clouds and textured meshes.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("render", help="render (and crop) cube-face projections")
    p.add_argument("model")
    p.add_argument("--viewpoints", default=None,
                   help="comma-separated list like +X,-Y (default: all six)")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = subs.add_parser("sample", help="sample canvases and write a manifest")
    p.add_argument("model")
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = subs.add_parser("score", help="score one model end to end")
    p.add_argument("model")
    p.add_argument("--bridge-scores", action="store_true",
                   help="let the backend produce scores directly (no head weights)")
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = subs.add_parser("train", help="train the regression head on a dataset")
    p.add_argument("dataset", help="CSV manifest: model_path, group_id, mos")
    p.add_argument("--val-groups", type=int, default=0,
                   help="hold out this many groups for best-epoch selection")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("evaluate", help="group-aware k-fold cross-validation")
    p.add_argument("dataset")
    p.add_argument("--k", type=int, default=5, help="fold count")
    p.add_argument("--format", choices=("json", "table"), default="json")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("sweep-n", help="cross-validate for every N in 1..6")
    p.add_argument("dataset")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--format", choices=("json", "table"), default="json")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep_n)

    p = subs.add_parser("ablate", help="viewpoint/grid sampling ablation grid")
    p.add_argument("dataset")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--rps", choices=sorted(_MODE_FLAGS), default="both",
                   help="random viewpoint sampling on/off/both")
    p.add_argument("--gms", choices=sorted(_MODE_FLAGS), default="both",
                   help="grid mini-patch sampling on/off/both")
    p.add_argument("--fixed-viewpoints", default=None,
                   help="viewpoint list used when rps is off "
                        "(default: five built-in sets, averaged)")
    p.add_argument("--format", choices=("json", "table"), default="json")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("bench", help="time the pipeline per stage and preset")
    p.add_argument("model")
    p.add_argument("--presets", default="tiny,base",
                   help="comma-separated presets to compare (first is baseline)")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--bridge-scores", action="store_true")
    p.add_argument("--format", choices=("json", "table"), default="json")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        ret = args.func(args)
        return 0 if ret is None else int(ret)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProjQAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()

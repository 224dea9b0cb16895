"""End-to-end orchestration: model file -> projections -> canvases -> score.

One function, `run_scoring`, drives the whole chain through named stages
(load, render, crop, gms, features, head) so the benchmark harness can time
each stage by passing a clock without changing any result.  Dataset-level
helpers (feature extraction across a manifest, group-aware cross-validation,
the N-sweep and the sampling ablation) build on the same per-item path with
seeds derived per item, which keeps results independent of worker count.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ScoringError
from .evaluation import (
    DatasetItem,
    EvalReport,
    aggregate_folds,
    evaluate_run,
    kfold_split,
)
from .features import ExtractorSpec, FeatureVector, extract_features, run_bridge
from .model_io import load_point_cloud, load_textured_mesh
from .projection import RenderConfig, ViewpointId, crop_background, render_model
from .sampling import (
    GridSpec,
    Rng,
    SampledProjectionSet,
    apply_grid_sampling,
    sample_viewpoints,
)
from .scoring import (
    HeadWeights,
    QualityResult,
    TrainConfig,
    aggregate_scores,
    score_projections,
    train_head,
)


class _NullClock:
    current = None

    @contextmanager
    def stage(self, name):
        yield


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to reproduce a scoring run, bar the model file."""

    n_projections: int = 5
    grid: GridSpec = field(default_factory=GridSpec)
    render: RenderConfig = field(default_factory=RenderConfig)
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    weights_path: Path | None = None
    seed: int = 0
    gms_enabled: bool = True
    fixed_viewpoints: tuple[ViewpointId, ...] | None = None
    bridge_scores: bool = False
    jobs: int = 1

    def __post_init__(self):
        if not 1 <= self.n_projections <= 6:
            raise ConfigError(
                f"n_projections must be in 1..6, got {self.n_projections}"
            )
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.bridge_scores and self.extractor.kind != "bridge":
            raise ConfigError("bridge_scores requires a bridge extractor")
        if self.fixed_viewpoints is not None:
            vps = tuple(self.fixed_viewpoints)
            if not vps or len(set(vps)) != len(vps):
                raise ConfigError("fixed viewpoints must be non-empty and distinct")
            object.__setattr__(self, "fixed_viewpoints", vps)
            object.__setattr__(self, "n_projections", len(vps))

    def to_dict(self) -> dict:
        return {
            "n_projections": self.n_projections,
            "grid": self.grid.to_dict(),
            "render": self.render.to_dict(),
            "extractor": {
                "kind": self.extractor.kind,
                "command": list(self.extractor.command),
            },
            "weights_path": None if self.weights_path is None else str(self.weights_path),
            "seed": self.seed,
            "gms_enabled": self.gms_enabled,
            "fixed_viewpoints": None
            if self.fixed_viewpoints is None
            else [vp.value for vp in self.fixed_viewpoints],
            "bridge_scores": self.bridge_scores,
            "jobs": self.jobs,
        }


PRESETS = {"tiny": 2, "base": 5}


def preset_config(name: str, **overrides) -> PipelineConfig:
    """tiny -> 2 projections, base -> 5; other fields may be overridden."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (expected tiny or base)")
    overrides.setdefault("n_projections", PRESETS[name])
    return PipelineConfig(**overrides)


def load_model(path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return load_point_cloud(path)
    if suffix == ".obj":
        return load_textured_mesh(path)
    raise ConfigError(f"unsupported model format {suffix!r} (expected .ply or .obj)")


def sample_for_model(
    model_path,
    cfg: PipelineConfig,
    rng: Rng,
    clock=None,
    model_id: str | None = None,
) -> SampledProjectionSet:
    """Stages load/render/crop/gms for one model, consuming `rng` in the
    canonical order: viewpoint draw first, then patch offsets."""
    clock = clock or _NullClock()
    model_id = model_id or Path(model_path).stem
    with clock.stage("load"):
        model = load_model(model_path)
    if cfg.fixed_viewpoints is not None:
        viewpoints = list(cfg.fixed_viewpoints)
    else:
        viewpoints = sample_viewpoints(cfg.n_projections, rng)
    with clock.stage("render"):
        raw = [render_model(model, vp, cfg.render) for vp in viewpoints]
    with clock.stage("crop"):
        cropped = [crop_background(img) for img in raw]
    with clock.stage("gms"):
        canvases = apply_grid_sampling(cropped, cfg.grid, rng, cfg.gms_enabled)
    return SampledProjectionSet(canvases, viewpoints, rng.seed, cfg.grid, model_id)


def run_scoring(
    model_path,
    cfg: PipelineConfig,
    weights: HeadWeights | None = None,
    clock=None,
    model_id: str | None = None,
) -> QualityResult:
    """Score one model end to end."""
    clock = clock or _NullClock()
    if weights is None and not cfg.bridge_scores:
        raise ScoringError("scoring requires head weights (or a scores-mode bridge)")
    sampled = sample_for_model(model_path, cfg, Rng(cfg.seed), clock, model_id)
    if cfg.bridge_scores:
        with clock.stage("features"):
            reply = run_bridge(sampled, cfg.extractor, "scores")
        with clock.stage("head"):
            scores = [float(s) for s in reply.scores]
    else:
        with clock.stage("features"):
            feats = extract_features(sampled, cfg.extractor)
        with clock.stage("head"):
            scores = score_projections(feats, weights)
    return QualityResult.from_scores(
        scores, sampled.viewpoints, cfg.seed, sampled.model_id
    )


def item_features(
    model_path,
    cfg: PipelineConfig,
    rng: Rng,
    model_id: str | None = None,
) -> list[FeatureVector]:
    sampled = sample_for_model(model_path, cfg, rng, None, model_id)
    return extract_features(sampled, cfg.extractor)


def dataset_features(
    items: list[DatasetItem],
    cfg: PipelineConfig,
) -> dict[str, list[FeatureVector]]:
    """Features for every manifest item; item seeds derive from cfg.seed and
    the item's manifest position, so outputs do not depend on cfg.jobs."""

    def one(index_item):
        index, item = index_item
        rng = Rng.spawn(cfg.seed, index)
        return item.item_id, item_features(item.model_path, cfg, rng, item.item_id)

    indexed = list(enumerate(items))
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            pairs = list(pool.map(one, indexed))
    else:
        pairs = [one(pair) for pair in indexed]
    return dict(pairs)


@dataclass
class CrossValResult:
    fold_reports: list[EvalReport]
    aggregate: EvalReport
    predictions: dict[str, float]
    plan_seed: int


def cross_validate(
    items: list[DatasetItem],
    features: dict[str, list[FeatureVector]],
    k: int,
    seed: int,
    train_cfg: TrainConfig,
) -> CrossValResult:
    """Group-aware k-fold: train the head on k-1 folds, report on the rest."""
    labels = {it.item_id: it.mos for it in items}
    plan = kfold_split([(it.item_id, it.group_id) for it in items], k, seed)
    reports = []
    predictions: dict[str, float] = {}
    for fold in range(k):
        train_ids = plan.items_outside_fold(fold)
        test_ids = plan.items_in_fold(fold)
        weights = train_head(
            [(features[i], labels[i]) for i in train_ids], train_cfg
        )
        preds = [
            aggregate_scores(score_projections(features[i], weights))
            for i in test_ids
        ]
        predictions.update(zip(test_ids, preds))
        reports.append(evaluate_run(preds, [labels[i] for i in test_ids]))
    return CrossValResult(reports, aggregate_folds(reports), predictions, seed)


def sweep_n(
    items: list[DatasetItem],
    cfg: PipelineConfig,
    k: int,
    train_cfg: TrainConfig,
) -> dict[int, CrossValResult]:
    """Cross-validation per projection count N in 1..6."""
    results = {}
    for n in range(1, 7):
        cfg_n = replace(cfg, n_projections=n, fixed_viewpoints=None)
        feats = dataset_features(items, cfg_n)
        results[n] = cross_validate(items, feats, k, cfg_n.seed, train_cfg)
    return results


def fixed_viewpoint_sets(n: int, count: int = 5) -> list[tuple[ViewpointId, ...]]:
    """`count` deterministic viewpoint subsets of size n, spread evenly over
    the lexicographic enumeration of all C(6,n) combinations (repeating only
    when fewer exist, as for n=6)."""
    if not 1 <= n <= 6:
        raise ConfigError(f"viewpoint count must be in 1..6, got {n}")
    combos = list(itertools.combinations(list(ViewpointId), n))
    picks = np.linspace(0, len(combos) - 1, count).round().astype(int)
    return [combos[i] for i in picks]


def ablate(
    items: list[DatasetItem],
    cfg: PipelineConfig,
    k: int,
    train_cfg: TrainConfig,
    fixed_sets: list[tuple[ViewpointId, ...]] | None = None,
    rps_modes: tuple[bool, ...] = (True, False),
    gms_modes: tuple[bool, ...] = (True, False),
) -> dict[str, EvalReport]:
    """The 2x2 sampling ablation: random-vs-fixed viewpoints x grid-vs-resize.

    Fixed-viewpoint rows average the aggregate criteria over `fixed_sets`
    (five evenly spread preset sets when not supplied).
    """
    if fixed_sets is None:
        fixed_sets = fixed_viewpoint_sets(cfg.n_projections)
    if False in rps_modes and not fixed_sets:
        raise ConfigError("fixed-viewpoint ablation requires viewpoint lists")
    rows: dict[str, EvalReport] = {}
    for rps_on in rps_modes:
        for gms_on in gms_modes:
            label = (
                f"rps={'on' if rps_on else 'off'},gms={'on' if gms_on else 'off'}"
            )
            if rps_on:
                cfg_run = replace(
                    cfg, gms_enabled=gms_on, fixed_viewpoints=None
                )
                feats = dataset_features(items, cfg_run)
                rows[label] = cross_validate(
                    items, feats, k, cfg_run.seed, train_cfg
                ).aggregate
            else:
                per_set = []
                for vps in fixed_sets:
                    cfg_run = replace(
                        cfg, gms_enabled=gms_on, fixed_viewpoints=vps
                    )
                    feats = dataset_features(items, cfg_run)
                    per_set.append(
                        cross_validate(
                            items, feats, k, cfg_run.seed, train_cfg
                        ).aggregate
                    )
                rows[label] = aggregate_folds(per_set)
    return rows

"""Wall-clock benchmark harness for the scoring pipeline.

Per-stage durations come from a monotonic clock wrapped around the pipeline's
stage boundaries; instrumentation never touches the data path, so timed and
untimed runs produce bit-identical results.  Every measurement is preceded by
one unrecorded warm-up run.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import BenchError, ProjQAError
from .pipeline import PipelineConfig, run_scoring
from .scoring import HeadWeights, QualityResult

STAGES = ("load", "render", "crop", "gms", "features", "head")


class StageClock:
    """Accumulates seconds per named stage; remembers the stage in flight.

    On a clean exit `current` resets to None; if the stage body raises,
    `current` keeps the stage name so the caller can report where the
    pipeline failed.
    """

    def __init__(self):
        self.stages: dict[str, float] = {}
        self.current: str | None = None

    @contextmanager
    def stage(self, name):
        self.current = name
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0
        self.current = None


@dataclass
class StageTimings:
    """Timing summary for one pipeline configuration."""

    label: str
    repeats: int
    totals: list[float]
    stage_means: dict[str, float]
    result: QualityResult
    parallel_jobs: int = 1

    def __post_init__(self):
        if len(self.totals) != self.repeats:
            raise BenchError("totals must hold one entry per repeat")
        if any(t < 0 for t in self.totals) or any(
            v < 0 for v in self.stage_means.values()
        ):
            raise BenchError("negative duration recorded")

    @property
    def mean_total(self) -> float:
        return float(np.mean(self.totals))

    @property
    def std_total(self) -> float:
        return float(np.std(self.totals))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "repeats": self.repeats,
            "totals": self.totals,
            "mean_total": self.mean_total,
            "std_total": self.std_total,
            "stage_means": self.stage_means,
            "parallel_jobs": self.parallel_jobs,
        }


def time_pipeline(
    model_path,
    cfg: PipelineConfig,
    repeats: int = 5,
    weights: HeadWeights | None = None,
    label: str | None = None,
) -> StageTimings:
    """Time `repeats` full scoring runs of one model, after one warm-up run."""
    if repeats < 3:
        raise BenchError(f"repeats must be at least 3, got {repeats}")
    label = label or f"n={cfg.n_projections}"

    def one_run():
        clock = StageClock()
        t0 = time.perf_counter()
        try:
            result = run_scoring(model_path, cfg, weights, clock)
        except ProjQAError as exc:
            stage = clock.current or "setup"
            raise BenchError(
                f"pipeline failed in stage '{stage}': {exc}", stage=stage
            ) from exc
        return time.perf_counter() - t0, clock.stages, result

    one_run()  # warm-up, excluded from statistics
    totals = []
    per_stage: dict[str, list[float]] = {s: [] for s in STAGES}
    result = None
    for _ in range(repeats):
        total, stages, result = one_run()
        totals.append(total)
        for s in STAGES:
            per_stage[s].append(stages.get(s, 0.0))
    stage_means = {s: float(np.mean(v)) for s, v in per_stage.items()}
    return StageTimings(
        label=label,
        repeats=repeats,
        totals=totals,
        stage_means=stage_means,
        result=result,
        parallel_jobs=cfg.jobs,
    )


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)
    baseline_label: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {"baseline": self.baseline_label, "rows": self.rows}, indent=2
        )


def compare_report(
    timings: list[StageTimings],
    baseline: int | str = 0,
    extras: dict | None = None,
) -> BenchReport:
    """Relative-time report: each row's mean total as a ratio of the baseline.

    `extras` may add {label: {"params_m": ..., "gflops": ...}} accounting
    columns (reported, not measured here).
    """
    if not timings:
        raise BenchError("no timings to compare")
    if len(timings) < 2:
        raise BenchError("compare_report needs at least 2 entries")
    labels = [t.label for t in timings]
    if isinstance(baseline, str):
        if baseline not in labels:
            raise BenchError(f"baseline label {baseline!r} not among {labels}")
        base_idx = labels.index(baseline)
    else:
        if not 0 <= baseline < len(timings):
            raise BenchError(f"baseline index {baseline} out of range")
        base_idx = baseline
    base_time = timings[base_idx].mean_total
    if base_time <= 0:
        raise BenchError("baseline mean total must be positive")
    extras = extras or {}
    rows = []
    for i, t in enumerate(timings):
        extra = extras.get(t.label, {})
        rows.append(
            {
                "label": t.label,
                "params_m": extra.get("params_m"),
                "gflops": extra.get("gflops"),
                "time_s": t.mean_total,
                "std_s": t.std_total,
                "ratio": t.mean_total / base_time,
                "baseline": i == base_idx,
                "stage_means": t.stage_means,
                "parallel_jobs": t.parallel_jobs,
            }
        )
    return BenchReport(rows=rows, baseline_label=timings[base_idx].label)


def bench_table(report: BenchReport) -> str:
    """Plain-text table: label, Param(M), Gflops, time_s, ratio."""
    headers = ("label", "Param(M)", "Gflops", "time_s", "ratio")
    lines_data = []
    for row in report.rows:
        mark = "*" if row["baseline"] else " "
        lines_data.append(
            (
                f"{mark}{row['label']}",
                "-" if row["params_m"] is None else f"{row['params_m']:.2f}",
                "-" if row["gflops"] is None else f"{row['gflops']:.2f}",
                f"{row['time_s']:.4f}",
                f"{row['ratio']:.2f}x",
            )
        )
    widths = [
        max(len(h), *(len(r[i]) for r in lines_data))
        for i, h in enumerate(headers)
    ]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [fmt(headers), fmt(tuple("-" * w for w in widths))]
    out.extend(fmt(r) for r in lines_data)
    out.append("* baseline row")
    return "\n".join(out)

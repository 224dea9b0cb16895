import numpy as np
import pytest

from projqa import (
    BenchError,
    GridSpec,
    PipelineConfig,
    QualityResult,
    RenderConfig,
    Rng,
    StageClock,
    StageTimings,
    bench_table,
    compare_report,
    init_head,
    run_scoring,
    time_pipeline,
)
from projqa.bench import STAGES


def small_cfg(seed=3):
    return PipelineConfig(
        n_projections=2,
        grid=GridSpec(rows=4, cols=4, patch=16),
        render=RenderConfig(viewport=96),
        seed=seed,
    )


def head_for_baseline(dim=12, hidden=8, seed=0):
    return init_head(dim, hidden, Rng(seed), "baseline-stats-v1")


def fake_result():
    return QualityResult.from_scores([1.0], [], 0)


def fake_timings(label, totals, jobs=1):
    return StageTimings(
        label=label,
        repeats=len(totals),
        totals=list(totals),
        stage_means={s: 0.0 for s in STAGES},
        result=fake_result(),
        parallel_jobs=jobs,
    )


class TestStageClock:
    def test_accumulates_and_clears_current(self):
        clock = StageClock()
        with clock.stage("load"):
            assert clock.current == "load"
        with clock.stage("load"):
            pass
        assert clock.current is None
        assert set(clock.stages) == {"load"}
        assert clock.stages["load"] >= 0.0

    def test_failed_stage_stays_current(self):
        clock = StageClock()
        with pytest.raises(RuntimeError):
            with clock.stage("render"):
                raise RuntimeError("boom")
        # the failing stage stays visible so errors can name it
        assert clock.current == "render"
        assert "render" in clock.stages


class TestStageTimings:
    def test_totals_length_validated(self):
        with pytest.raises(BenchError, match="one entry per repeat"):
            StageTimings(label="x", repeats=3, totals=[0.1, 0.2],
                         stage_means={}, result=fake_result())

    def test_negative_duration_rejected(self):
        with pytest.raises(BenchError, match="negative"):
            fake_timings("x", [0.1, -0.2, 0.1])

    def test_mean_and_std(self):
        t = fake_timings("x", [1.0, 2.0, 3.0])
        assert t.mean_total == pytest.approx(2.0)
        assert t.std_total == pytest.approx(np.std([1.0, 2.0, 3.0]))

    def test_to_dict_round_trips_fields(self):
        t = fake_timings("tiny", [0.1, 0.1, 0.1], jobs=2)
        d = t.to_dict()
        assert d["label"] == "tiny" and d["parallel_jobs"] == 2
        assert d["repeats"] == 3 and len(d["totals"]) == 3


class TestTimePipeline:
    def test_repeats_minimum(self, small_cloud_ply):
        with pytest.raises(BenchError, match="at least 3"):
            time_pipeline(small_cloud_ply, small_cfg(), repeats=2,
                          weights=head_for_baseline())

    def test_collects_all_stage_keys(self, small_cloud_ply):
        t = time_pipeline(small_cloud_ply, small_cfg(), repeats=3,
                          weights=head_for_baseline())
        assert set(t.stage_means) == set(STAGES)
        assert t.repeats == 3 and len(t.totals) == 3
        assert all(v >= 0 for v in t.stage_means.values())

    def test_instrumentation_does_not_change_results(self, small_cloud_ply):
        cfg = small_cfg(seed=11)
        weights = head_for_baseline(seed=4)
        timed = time_pipeline(small_cloud_ply, cfg, repeats=3, weights=weights)
        plain = run_scoring(small_cloud_ply, cfg, weights)
        assert timed.result.per_projection == plain.per_projection
        assert timed.result.aggregate == plain.aggregate
        assert timed.result.viewpoints == plain.viewpoints

    def test_default_label_names_projection_count(self, small_cloud_ply):
        t = time_pipeline(small_cloud_ply, small_cfg(), repeats=3,
                          weights=head_for_baseline())
        assert t.label == "n=2"

    def test_failure_reports_stage_load(self, tmp_path):
        with pytest.raises(BenchError, match="stage 'load'") as exc_info:
            time_pipeline(tmp_path / "missing.ply", small_cfg(), repeats=3,
                          weights=head_for_baseline())
        assert exc_info.value.stage == "load"

    def test_failure_reports_stage_head(self, small_cloud_ply):
        bad = init_head(5, 4, Rng(0), "baseline-stats-v1")  # wrong dim
        with pytest.raises(BenchError, match="stage 'head'") as exc_info:
            time_pipeline(small_cloud_ply, small_cfg(), repeats=3, weights=bad)
        assert exc_info.value.stage == "head"


class TestCompareReport:
    def test_ratio_against_baseline(self):
        tiny = fake_timings("tiny", [0.1, 0.1, 0.1])
        base = fake_timings("base", [0.2, 0.2, 0.2])
        report = compare_report([tiny, base], baseline=0)
        assert report.baseline_label == "tiny"
        ratios = {r["label"]: r["ratio"] for r in report.rows}
        assert ratios["tiny"] == pytest.approx(1.0)
        assert ratios["base"] == pytest.approx(2.0)

    def test_baseline_by_label(self):
        a = fake_timings("a", [0.4, 0.4, 0.4])
        b = fake_timings("b", [0.1, 0.1, 0.1])
        report = compare_report([a, b], baseline="b")
        ratios = {r["label"]: r["ratio"] for r in report.rows}
        assert ratios["a"] == pytest.approx(4.0)
        flags = {r["label"]: r["baseline"] for r in report.rows}
        assert flags == {"a": False, "b": True}

    def test_three_rows_single_baseline_flag(self):
        ts = [fake_timings(l, [v, v, v])
              for l, v in (("a", 0.1), ("b", 0.2), ("c", 0.3))]
        report = compare_report(ts, baseline=1)
        assert sum(r["baseline"] for r in report.rows) == 1
        assert report.rows[1]["baseline"]

    def test_extras_columns_attached(self):
        tiny = fake_timings("tiny", [0.1, 0.1, 0.1])
        base = fake_timings("base", [0.2, 0.2, 0.2])
        extras = {"tiny": {"params_m": 28.29, "gflops": 8.74},
                  "base": {"params_m": 28.29, "gflops": 21.87}}
        report = compare_report([tiny, base], extras=extras)
        by = {r["label"]: r for r in report.rows}
        assert by["tiny"]["gflops"] == 8.74
        assert by["base"]["params_m"] == 28.29

    def test_requires_two_entries(self):
        with pytest.raises(BenchError, match="at least 2"):
            compare_report([fake_timings("only", [0.1, 0.1, 0.1])])

    def test_unknown_baseline_label(self):
        ts = [fake_timings("a", [0.1, 0.1, 0.1]),
              fake_timings("b", [0.1, 0.1, 0.1])]
        with pytest.raises(BenchError, match="not among"):
            compare_report(ts, baseline="zzz")

    def test_baseline_index_out_of_range(self):
        ts = [fake_timings("a", [0.1, 0.1, 0.1]),
              fake_timings("b", [0.1, 0.1, 0.1])]
        with pytest.raises(BenchError, match="out of range"):
            compare_report(ts, baseline=5)

    def test_json_serializable(self):
        import json

        ts = [fake_timings("a", [0.1, 0.1, 0.1]),
              fake_timings("b", [0.3, 0.3, 0.3])]
        doc = json.loads(compare_report(ts).to_json())
        assert doc["baseline"] == "a"
        assert len(doc["rows"]) == 2


class TestBenchTable:
    def test_marks_baseline_and_fills_missing(self):
        tiny = fake_timings("tiny", [0.1, 0.1, 0.1])
        base = fake_timings("base", [0.2, 0.2, 0.2])
        extras = {"base": {"params_m": 28.29, "gflops": 21.87}}
        text = bench_table(compare_report([tiny, base], extras=extras))
        lines = text.splitlines()
        assert "Param(M)" in lines[0] and "ratio" in lines[0]
        assert any(line.startswith("*tiny") for line in lines)
        assert "2.00x" in text and "1.00x" in text
        assert "28.29" in text and "21.87" in text
        tiny_line = next(l for l in lines if l.startswith("*tiny"))
        assert "-" in tiny_line  # missing accounting shown as dash

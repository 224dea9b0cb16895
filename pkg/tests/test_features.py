import json
import sys

import numpy as np
import pytest

from projqa import (
    BASELINE_DIM,
    BASELINE_EXTRACTOR_ID,
    BridgeError,
    ExtractorSpec,
    FeatureError,
    FeatureVector,
    GridSpec,
    RenderConfig,
    Rng,
    baseline_features,
    extract_features,
    read_backend_reply,
    run_bridge,
    sample_projection_set,
    write_manifest,
)
from synthdata import random_cloud

GRID = GridSpec(7, 7, 32)


def flat_canvas(value=255):
    return np.full((224, 224, 3), value, dtype=np.uint8)


def sampled_set(n=2, seed=0):
    cloud = random_cloud(2000, seed=seed)
    return sample_projection_set(
        cloud, n, GRID, RenderConfig(viewport=256), Rng(seed), model_id="m0"
    )


# A stub backend: reads the manifest, answers with deterministic per-canvas
# features (or scores) derived from the PNG bytes.
STUB_BACKEND = """\
import hashlib, json, sys
from pathlib import Path

mode = sys.argv[1]
manifest = Path(sys.argv[sys.argv.index("--manifest") + 1])
out = Path(sys.argv[sys.argv.index("--out") + 1])
doc = json.loads(manifest.read_text())
entries = []
for e in doc["entries"]:
    digest = hashlib.sha256((manifest.parent / e["canvas_path"]).read_bytes()).digest()
    vals = [b / 255.0 for b in digest[:4]]
    if mode == "features":
        entries.append({"canvas_path": e["canvas_path"], "features": vals})
    else:
        entries.append({"canvas_path": e["canvas_path"], "score": sum(vals)})
reply = {
    "schema_version": 1,
    "extractor_id": "stub-v1",
    "dim": 4,
    "gflops": 0.25 * len(entries),
    "params_m": 1.5,
    "entries": entries,
}
out.write_text(json.dumps(reply))
"""


@pytest.fixture
def stub_backend(tmp_path):
    script = tmp_path / "stub_backend.py"
    script.write_text(STUB_BACKEND)
    return ExtractorSpec("bridge", (sys.executable, str(script)))


class TestFeatureVector:
    def test_dim_and_id(self):
        v = FeatureVector([1.0, 2.0, 3.0], "x")
        assert v.dim == 3
        assert v.extractor_id == "x"

    def test_rejects_empty_and_nan(self):
        with pytest.raises(FeatureError):
            FeatureVector([], "x")
        with pytest.raises(FeatureError):
            FeatureVector([1.0, np.nan], "x")
        with pytest.raises(FeatureError):
            FeatureVector([1.0], "")


class TestExtractorSpec:
    def test_bridge_needs_command(self):
        with pytest.raises(FeatureError):
            ExtractorSpec("bridge")

    def test_unknown_kind(self):
        with pytest.raises(FeatureError):
            ExtractorSpec("neural")


class TestBaselineFeatures:
    def test_dim_and_id(self):
        v = baseline_features(flat_canvas(), GRID)
        assert v.dim == BASELINE_DIM
        assert v.extractor_id == BASELINE_EXTRACTOR_ID

    def test_white_canvas_statistics(self):
        v = baseline_features(flat_canvas(255), GRID).values
        # luma mean 1.0 everywhere, zero spread, zero gradient, no content
        assert v[0] == pytest.approx(1.0)
        assert v[1] == pytest.approx(0.0)
        assert v[2] == pytest.approx(0.0)
        assert v[5] == pytest.approx(0.0)
        assert v[6] == pytest.approx(1.0)

    def test_gradient_energy_monotone_in_noise(self):
        rng = np.random.default_rng(0)
        base = flat_canvas(128).astype(np.float64)
        noise = rng.normal(0, 1, base.shape)
        previous = -1.0
        for amplitude in (0.0, 8.0, 16.0, 32.0, 64.0):
            canvas = np.clip(base + amplitude * noise, 0, 255).astype(np.uint8)
            grad_mean = baseline_features(canvas, GRID).values[8]
            assert grad_mean > previous
            previous = grad_mean

    def test_shape_must_match_grid(self):
        with pytest.raises(FeatureError, match="grid product"):
            baseline_features(np.zeros((100, 100, 3), dtype=np.uint8), GRID)

    def test_deterministic(self):
        canvas = sampled_set().canvases[0]
        a = baseline_features(canvas, GRID).values
        b = baseline_features(canvas, GRID).values
        assert np.array_equal(a, b)


class TestManifest:
    def test_write_creates_pngs_and_schema(self, tmp_path):
        s = sampled_set(n=3, seed=1)
        path = write_manifest(s, tmp_path / "out")
        doc = json.loads(path.read_text())
        assert doc["schema_version"] == 1
        assert doc["model_id"] == "m0"
        assert doc["seed"] == 1
        assert doc["grid"] == {"rows": 7, "cols": 7, "patch": 32}
        assert len(doc["entries"]) == 3
        for entry, vp in zip(doc["entries"], s.viewpoints):
            assert entry["viewpoint"] == vp.value
            assert (tmp_path / "out" / entry["canvas_path"]).exists()

    def test_canvas_pngs_round_trip(self, tmp_path):
        from PIL import Image

        s = sampled_set(n=2, seed=2)
        path = write_manifest(s, tmp_path)
        doc = json.loads(path.read_text())
        for entry, canvas in zip(doc["entries"], s.canvases):
            reread = np.asarray(Image.open(tmp_path / entry["canvas_path"]).convert("RGB"))
            assert np.array_equal(reread, canvas)


class TestReadBackendReply:
    def _write(self, tmp_path, doc):
        p = tmp_path / "reply.json"
        p.write_text(json.dumps(doc))
        return p

    def _valid(self):
        return {
            "schema_version": 1,
            "extractor_id": "stub-v1",
            "dim": 2,
            "entries": [
                {"canvas_path": "a.png", "features": [0.1, 0.2]},
                {"canvas_path": "b.png", "features": [0.3, 0.4]},
            ],
        }

    def test_features_reply(self, tmp_path):
        reply = read_backend_reply(self._write(tmp_path, self._valid()))
        assert reply.extractor_id == "stub-v1"
        assert reply.dim == 2
        assert reply.canvas_paths == ["a.png", "b.png"]
        assert np.allclose(reply.features, [[0.1, 0.2], [0.3, 0.4]])
        assert reply.scores is None

    def test_scores_reply(self, tmp_path):
        doc = self._valid()
        doc["entries"] = [{"canvas_path": "a.png", "score": 4.5}]
        reply = read_backend_reply(self._write(tmp_path, doc))
        assert reply.features is None
        assert np.allclose(reply.scores, [4.5])

    def test_dim_mismatch_rejected(self, tmp_path):
        doc = self._valid()
        doc["entries"][1]["features"] = [0.3]
        with pytest.raises(BridgeError, match="declared dim"):
            read_backend_reply(self._write(tmp_path, doc))

    def test_missing_file(self, tmp_path):
        with pytest.raises(BridgeError, match="not found"):
            read_backend_reply(tmp_path / "nope.json")

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(BridgeError, match="malformed"):
            read_backend_reply(p)

    def test_wrong_schema_version(self, tmp_path):
        doc = self._valid()
        doc["schema_version"] = 9
        with pytest.raises(BridgeError, match="schema_version"):
            read_backend_reply(self._write(tmp_path, doc))

    def test_non_finite_rejected(self, tmp_path):
        doc = self._valid()
        doc["entries"][0]["features"] = [1e400, 0.0]  # parses to inf
        with pytest.raises(BridgeError, match="non-finite"):
            read_backend_reply(self._write(tmp_path, doc))

    def test_mixed_entries_rejected(self, tmp_path):
        doc = self._valid()
        doc["entries"][1] = {"canvas_path": "b.png", "score": 1.0}
        with pytest.raises(BridgeError, match="mixes"):
            read_backend_reply(self._write(tmp_path, doc))

    def test_entry_without_payload_rejected(self, tmp_path):
        doc = self._valid()
        doc["entries"][1] = {"canvas_path": "b.png"}
        with pytest.raises(BridgeError, match="neither features nor score"):
            read_backend_reply(self._write(tmp_path, doc))


class TestRunBridge:
    def test_features_mode(self, stub_backend, tmp_path):
        s = sampled_set(n=3, seed=3)
        reply = run_bridge(s, stub_backend, "features", tmp_path / "x")
        assert reply.dim == 4
        assert reply.features.shape == (3, 4)
        assert reply.gflops == pytest.approx(0.75)

    def test_scores_mode(self, stub_backend):
        s = sampled_set(n=2, seed=4)
        reply = run_bridge(s, stub_backend, "scores")
        assert reply.scores.shape == (2,)

    def test_batched_exchange_is_deterministic(self, stub_backend, tmp_path):
        s = sampled_set(n=2, seed=5)
        a = run_bridge(s, stub_backend, "features", tmp_path / "a")
        b = run_bridge(s, stub_backend, "features", tmp_path / "b")
        assert np.array_equal(a.features, b.features)

    def test_failing_backend_reports_stderr(self, tmp_path):
        script = tmp_path / "boom.py"
        script.write_text("import sys; sys.stderr.write('kaboom\\n'); sys.exit(3)")
        spec = ExtractorSpec("bridge", (sys.executable, str(script)))
        with pytest.raises(BridgeError, match="status 3") as err:
            run_bridge(sampled_set(), spec, "features", tmp_path / "w")
        assert "kaboom" in err.value.diagnostics

    def test_order_violation_detected(self, tmp_path):
        script = tmp_path / "shuffler.py"
        script.write_text(
            STUB_BACKEND.replace(
                'doc["entries"]:', 'list(reversed(doc["entries"])):'
            )
        )
        spec = ExtractorSpec("bridge", (sys.executable, str(script)))
        with pytest.raises(BridgeError, match="manifest order"):
            run_bridge(sampled_set(n=2, seed=6), spec, "features", tmp_path / "w")

    def test_mode_mismatch_detected(self, tmp_path):
        script = tmp_path / "wrongmode.py"
        # always answers with scores, even when asked for features
        script.write_text(STUB_BACKEND.replace('mode = sys.argv[1]', 'mode = "scores"'))
        spec = ExtractorSpec("bridge", (sys.executable, str(script)))
        with pytest.raises(BridgeError, match="no feature vectors"):
            run_bridge(sampled_set(n=2, seed=7), spec, "features", tmp_path / "w")

    def test_unknown_command_rejected(self, tmp_path):
        spec = ExtractorSpec("bridge", ("/nonexistent/backend-bin",))
        with pytest.raises(BridgeError, match="not found"):
            run_bridge(sampled_set(), spec, "features", tmp_path / "w")


class TestExtractFeatures:
    def test_baseline_per_canvas(self):
        s = sampled_set(n=3, seed=8)
        feats = extract_features(s, ExtractorSpec())
        assert len(feats) == 3
        assert all(f.dim == BASELINE_DIM for f in feats)

    def test_bridge_vectors_tagged_with_backend_id(self, stub_backend, tmp_path):
        s = sampled_set(n=2, seed=9)
        feats = extract_features(s, stub_backend, tmp_path / "w")
        assert [f.extractor_id for f in feats] == ["stub-v1", "stub-v1"]
        assert all(f.dim == 4 for f in feats)

"""Feature extraction from sampled canvases.

Two extractor kinds share one interface: a self-contained `baseline`
(handcrafted luminance/gradient/color statistics, 12 dims) and a `bridge`
that hands the canvases to an external backend process through a manifest
of PNG files and reads back a JSON reply with either feature vectors or
ready scores.  Scoring refuses to mix weights and features from different
extractors, so the extractor identity travels with every vector.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BridgeError, FeatureError
from .sampling import GridSpec, SampledProjectionSet

BASELINE_EXTRACTOR_ID = "baseline-stats-v1"
BASELINE_DIM = 12

MANIFEST_SCHEMA_VERSION = 1


@dataclass
class FeatureVector:
    values: np.ndarray
    extractor_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size < 1:
            raise FeatureError("feature vector is empty")
        if not np.all(np.isfinite(self.values)):
            raise FeatureError("feature vector contains non-finite values")
        if not self.extractor_id:
            raise FeatureError("feature vector has no extractor id")

    @property
    def dim(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class ExtractorSpec:
    """Which extractor to run; bridge extractors carry the backend command."""

    kind: str = "baseline"
    command: tuple[str, ...] = ()
    timeout: float = 600.0

    def __post_init__(self):
        if self.kind not in ("baseline", "bridge"):
            raise FeatureError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "bridge" and not self.command:
            raise FeatureError("bridge extractor requires a backend command")


def _luma(canvas: np.ndarray) -> np.ndarray:
    rgb = canvas.astype(np.float64) / 255.0
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def _gradient_magnitude(luma: np.ndarray) -> np.ndarray:
    gx = np.zeros_like(luma)
    gy = np.zeros_like(luma)
    gx[:, :-1] = luma[:, 1:] - luma[:, :-1]
    gy[:-1, :] = luma[1:, :] - luma[:-1, :]
    return np.hypot(gx, gy)


def _patch_stats(patch: np.ndarray) -> np.ndarray:
    """Six statistics of one image region: luma mean/std, gradient mean/std,
    colorfulness, and the fraction of non-background (non-white) pixels."""
    luma = _luma(patch)
    grad = _gradient_magnitude(luma)
    rgb = patch.astype(np.float64) / 255.0
    rg = rgb[..., 0] - rgb[..., 1]
    yb = 0.5 * (rgb[..., 0] + rgb[..., 1]) - rgb[..., 2]
    colorfulness = np.sqrt(rg.var() + yb.var()) + 0.3 * np.hypot(rg.mean(), yb.mean())
    content = float(np.mean(luma < 0.98))
    return np.array(
        [luma.mean(), luma.std(), grad.mean(), grad.std(), colorfulness, content]
    )


def baseline_features(canvas: np.ndarray, grid: GridSpec) -> FeatureVector:
    """Handcrafted 12-dim descriptor of one canvas.

    Dims 0-5 average the six per-patch statistics over the grid cells (each
    cell computed on its own sub-image, so gradients never cross a splice
    seam); dims 6-11 are the same statistics over the whole canvas.
    """
    expected = grid.canvas_shape + (3,)
    if canvas.shape != expected:
        raise FeatureError(
            f"canvas shape {canvas.shape} does not match grid product {expected}"
        )
    p = grid.patch
    cell_stats = np.array(
        [
            _patch_stats(canvas[r * p:(r + 1) * p, c * p:(c + 1) * p])
            for r in range(grid.rows)
            for c in range(grid.cols)
        ]
    )
    values = np.concatenate([cell_stats.mean(axis=0), _patch_stats(canvas)])
    return FeatureVector(values, BASELINE_EXTRACTOR_ID)


def _canvas_filename(index: int, viewpoint) -> str:
    tag = viewpoint.value.replace("+", "p").replace("-", "m")
    return f"canvas_{index:02d}_{tag}.png"


def write_manifest(sampled: SampledProjectionSet, out_dir) -> Path:
    """Write canvases as PNGs plus a manifest JSON; returns the manifest path.

    Entry order in the manifest is the canvas order of the set, and replies
    are required to echo it back unchanged.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (canvas, vp) in enumerate(zip(sampled.canvases, sampled.viewpoints)):
        name = _canvas_filename(i, vp)
        Image.fromarray(canvas, mode="RGB").save(out_dir / name)
        entries.append({"viewpoint": vp.value, "canvas_path": name})
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "model_id": sampled.model_id,
        "seed": sampled.seed,
        "grid": sampled.grid.to_dict(),
        "entries": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


@dataclass
class BackendReply:
    extractor_id: str
    dim: int
    canvas_paths: list[str]
    features: np.ndarray | None = None
    scores: np.ndarray | None = None
    gflops: float | None = None
    params_m: float | None = None


def read_backend_reply(path) -> BackendReply:
    """Parse and validate one backend reply JSON."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise BridgeError(f"backend reply not found: {path}")
    except json.JSONDecodeError as exc:
        raise BridgeError(f"malformed backend reply {path}: {exc}")
    if doc.get("schema_version") != 1:
        raise BridgeError(
            f"unsupported reply schema_version {doc.get('schema_version')!r}"
        )
    for key in ("extractor_id", "dim", "entries"):
        if key not in doc:
            raise BridgeError(f"backend reply missing field {key!r}")
    dim = int(doc["dim"])
    entries = doc["entries"]
    if not isinstance(entries, list) or not entries:
        raise BridgeError("backend reply has no entries")
    paths = []
    feats = []
    scores = []
    for i, entry in enumerate(entries):
        if "canvas_path" not in entry:
            raise BridgeError(f"reply entry {i} missing canvas_path")
        paths.append(entry["canvas_path"])
        if "features" in entry:
            vec = np.asarray(entry["features"], dtype=np.float64)
            if vec.shape != (dim,):
                raise BridgeError(
                    f"reply entry {i} has {vec.size} features, declared dim is {dim}"
                )
            feats.append(vec)
        elif "score" in entry:
            scores.append(float(entry["score"]))
        else:
            raise BridgeError(f"reply entry {i} has neither features nor score")
    if feats and scores:
        raise BridgeError("backend reply mixes feature entries and score entries")
    reply = BackendReply(
        extractor_id=str(doc["extractor_id"]),
        dim=dim,
        canvas_paths=paths,
        features=np.stack(feats) if feats else None,
        scores=np.asarray(scores, dtype=np.float64) if scores else None,
        gflops=None if doc.get("gflops") is None else float(doc["gflops"]),
        params_m=None if doc.get("params_m") is None else float(doc["params_m"]),
    )
    if reply.features is not None and not np.all(np.isfinite(reply.features)):
        raise BridgeError("backend reply contains non-finite features")
    if reply.scores is not None and not np.all(np.isfinite(reply.scores)):
        raise BridgeError("backend reply contains non-finite scores")
    if not reply.extractor_id:
        raise BridgeError("backend reply has an empty extractor_id")
    return reply


def run_bridge(
    sampled: SampledProjectionSet,
    spec: ExtractorSpec,
    mode: str,
    workdir=None,
) -> BackendReply:
    """One batched exchange with the backend for one model's canvases."""
    if spec.kind != "bridge":
        raise BridgeError("run_bridge requires a bridge extractor spec")
    if mode not in ("features", "scores"):
        raise BridgeError(f"unknown bridge mode {mode!r}")
    if workdir is None:
        with tempfile.TemporaryDirectory(prefix="projqa-bridge-") as tmp:
            return run_bridge(sampled, spec, mode, tmp)
    workdir = Path(workdir)
    manifest_path = write_manifest(sampled, workdir)
    reply_path = workdir / "reply.json"
    cmd = list(spec.command) + [
        mode,
        "--manifest",
        str(manifest_path),
        "--out",
        str(reply_path),
    ]
    try:
        proc = subprocess.run(
            cmd, capture_output=True, text=True, timeout=spec.timeout
        )
    except FileNotFoundError as exc:
        raise BridgeError(f"backend command not found: {exc}")
    except subprocess.TimeoutExpired:
        raise BridgeError(f"backend timed out after {spec.timeout:.0f}s")
    if proc.returncode != 0:
        tail = "\n".join(proc.stderr.strip().splitlines()[-12:])
        raise BridgeError(
            f"backend exited with status {proc.returncode}", diagnostics=tail
        )
    reply = read_backend_reply(reply_path)
    expected = [e["canvas_path"] for e in json.loads(manifest_path.read_text())["entries"]]
    if reply.canvas_paths != expected:
        raise BridgeError(
            "backend reply entries do not echo the manifest order "
            f"(expected {expected}, got {reply.canvas_paths})"
        )
    if mode == "features" and reply.features is None:
        raise BridgeError("backend reply has no feature vectors in features mode")
    if mode == "scores" and reply.scores is None:
        raise BridgeError("backend reply has no scores in scores mode")
    return reply


def extract_features(
    sampled: SampledProjectionSet,
    spec: ExtractorSpec,
    workdir=None,
) -> list[FeatureVector]:
    """Feature vectors for every canvas of the set, in canvas order."""
    if spec.kind == "baseline":
        return [baseline_features(c, sampled.grid) for c in sampled.canvases]
    reply = run_bridge(sampled, spec, "features", workdir)
    return [FeatureVector(row, reply.extractor_id) for row in reply.features]

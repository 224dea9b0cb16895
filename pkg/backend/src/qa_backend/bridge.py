"""Manifest/reply plumbing for the canvas bridge.

The caller hands over a manifest JSON listing rendered canvases; this module
reads it, loads the images as normalized tensors, and writes the reply JSON
in the shape the caller's `read_backend_reply` expects: entries echo the
manifest's canvas_path strings in order, each carrying either a feature
vector or a scalar score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import CanvasError, QABackendError

MANIFEST_SCHEMA_VERSION = 1
REPLY_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CanvasEntry:
    viewpoint: str
    canvas_path: str  # as written in the manifest; echoed verbatim in the reply
    resolved: Path  # absolute path on disk


@dataclass(frozen=True)
class Manifest:
    model_id: str
    seed: int
    entries: tuple[CanvasEntry, ...]


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise QABackendError(f"cannot read manifest: {exc}")
    except json.JSONDecodeError as exc:
        raise QABackendError(f"manifest is not valid JSON: {exc}")
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise QABackendError(
            f"manifest schema_version {doc.get('schema_version')!r} unsupported"
        )
    raw = doc.get("entries")
    if not isinstance(raw, list) or not raw:
        raise QABackendError("manifest has no canvas entries")
    entries = []
    for i, ent in enumerate(raw):
        if "canvas_path" not in ent:
            raise QABackendError(f"manifest entry {i} lacks canvas_path")
        rel = str(ent["canvas_path"])
        entries.append(
            CanvasEntry(
                viewpoint=str(ent.get("viewpoint", "")),
                canvas_path=rel,
                resolved=(path.parent / rel).resolve(),
            )
        )
    return Manifest(
        model_id=str(doc.get("model_id", "")),
        seed=int(doc.get("seed", 0)),
        entries=tuple(entries),
    )


def load_canvas(path: Path) -> torch.Tensor:
    """One canvas as a normalized (3, H, W) float tensor."""
    from .model import normalize_batch

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise CanvasError(f"cannot load canvas {path}: {exc}", failed=[str(path)])
    tensor = torch.from_numpy(arr).permute(2, 0, 1)
    return normalize_batch(tensor)


def write_reply(
    out_path,
    extractor_id: str,
    dim: int,
    entries: list[dict],
    gflops: float | None = None,
    params_m: float | None = None,
) -> None:
    doc: dict = {
        "schema_version": REPLY_SCHEMA_VERSION,
        "extractor_id": extractor_id,
        "dim": int(dim),
        "entries": entries,
    }
    if gflops is not None:
        doc["gflops"] = float(gflops)
    if params_m is not None:
        doc["params_m"] = float(params_m)
    Path(out_path).write_text(json.dumps(doc))

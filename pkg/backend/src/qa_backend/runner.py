"""Batched feature extraction and scoring over a manifest's canvases.

Canvases that share a size run through the backbone in one batch; mixed
sizes fall back to per-size chunks so the reply still lists every entry in
manifest order.  A canvas that cannot be read produces a per-entry error
record and the run is reported as failed, rather than silently dropping the
entry or inventing numbers for it.
"""

from __future__ import annotations

import torch

from .bridge import CanvasEntry, Manifest, load_canvas
from .errors import CanvasError
from .model import (
    EXTRACTOR_ID,
    ScoringModel,
    feature_dim,
    gflops_for_canvases,
    params_m,
    pooled_features,
)

_BATCH = 16


def _load_all(entries) -> tuple[list[torch.Tensor | None], list[str]]:
    tensors: list[torch.Tensor | None] = []
    failures: list[str] = []
    for ent in entries:
        try:
            tensors.append(load_canvas(ent.resolved))
        except CanvasError:
            tensors.append(None)
            failures.append(ent.canvas_path)
    return tensors, failures


def _batched(backbone_fn, tensors: list[torch.Tensor]) -> list[torch.Tensor]:
    """Run backbone_fn over same-size chunks, preserving input order."""
    out: list[torch.Tensor | None] = [None] * len(tensors)
    by_size: dict[tuple[int, int], list[int]] = {}
    for i, t in enumerate(tensors):
        by_size.setdefault(tuple(t.shape[-2:]), []).append(i)
    with torch.no_grad():
        for idxs in by_size.values():
            for start in range(0, len(idxs), _BATCH):
                chunk = idxs[start : start + _BATCH]
                batch = torch.stack([tensors[i] for i in chunk])
                result = backbone_fn(batch)
                for j, i in enumerate(chunk):
                    out[i] = result[j]
    return out  # type: ignore[return-value]


def _run(model_or_backbone, manifest: Manifest, mode: str) -> dict:
    tensors, failures = _load_all(manifest.entries)
    ok = [(i, t) for i, t in enumerate(tensors) if t is not None]
    if mode == "features":
        backbone = model_or_backbone
        fn = lambda batch: pooled_features(backbone, batch)  # noqa: E731
        dim = feature_dim(backbone)
        pm = params_m(backbone)
    else:
        model: ScoringModel = model_or_backbone
        model.eval()
        fn = model
        dim = feature_dim(model.backbone)
        pm = params_m(model)

    values = _batched(fn, [t for _, t in ok]) if ok else []
    by_index = {i: v for (i, _), v in zip(ok, values)}

    entries = []
    for i, ent in enumerate(manifest.entries):
        row: dict = {"canvas_path": ent.canvas_path}
        if i in by_index:
            v = by_index[i]
            if mode == "features":
                row["features"] = [float(x) for x in v.tolist()]
            else:
                row["score"] = float(v.item())
        else:
            row["error"] = "cannot load canvas"
        entries.append(row)

    sizes = [tuple(t.shape[-2:]) for t in tensors if t is not None]
    return {
        "extractor_id": EXTRACTOR_ID,
        "dim": dim,
        "entries": entries,
        "gflops": gflops_for_canvases(sizes),
        "params_m": pm,
        "failures": failures,
    }


def extract_features(backbone, manifest: Manifest) -> dict:
    return _run(backbone, manifest, "features")


def score_canvases(model: ScoringModel, manifest: Manifest) -> dict:
    return _run(model, manifest, "scores")

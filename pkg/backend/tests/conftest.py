import json
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from qa_backend import build_backbone

BACKEND_CLI = Path(__file__).resolve().parents[1] / "backend_cli.py"


def toy_canvas(item: int, variant: int = 0, size: int = 64) -> np.ndarray:
    """Pattern that is clearly different per item (hue and stripe period)."""
    y, x = np.mgrid[0:size, 0:size]
    period = 4 + 3 * item
    stripes = ((x + variant * 2) // period + y // period) % 2
    base = np.array([(item * 37) % 255, (255 - item * 29) % 255, (item * 61 + 40) % 255])
    img = stripes[..., None] * base + (1 - stripes[..., None]) * (255 - base)
    return img.astype(np.uint8)


def write_canvas_manifest(out_dir: Path, n: int, size: int = 64) -> Path:
    """Manifest with n distinct patterned canvases, named like the caller's."""
    out_dir.mkdir(parents=True, exist_ok=True)
    tags = ["pX", "mX", "pY", "mY", "pZ", "mZ"]
    entries = []
    for i in range(n):
        name = f"canvas_{i:02d}_{tags[i % 6]}.png"
        Image.fromarray(toy_canvas(i, size=size)).save(out_dir / name)
        entries.append({"viewpoint": tags[i % 6], "canvas_path": name})
    path = out_dir / "manifest.json"
    path.write_text(
        json.dumps(
            {
                "schema_version": 1,
                "model_id": f"toy_{n}",
                "seed": 0,
                "grid": {"rows": 4, "cols": 4, "patch": size // 4},
                "entries": entries,
            }
        )
    )
    return path


@pytest.fixture(scope="session")
def backbone():
    torch.manual_seed(0)
    bb, tag = build_backbone("random", seed=0)
    bb.eval()
    assert tag == "random"
    return bb


@pytest.fixture(scope="session")
def toy_train_manifest(tmp_path_factory) -> Path:
    """Eight labelled items, two canvases each, labels 0..7."""
    work = tmp_path_factory.mktemp("train")
    items = []
    for i in range(8):
        paths = []
        for v in range(2):
            p = work / f"item{i}_c{v}.png"
            Image.fromarray(toy_canvas(i, v)).save(p)
            paths.append(p.name)
        items.append({"item_id": f"t{i}", "mos": float(i), "canvases": paths})
    path = work / "train.json"
    path.write_text(json.dumps({"schema_version": 1, "items": items}))
    return path

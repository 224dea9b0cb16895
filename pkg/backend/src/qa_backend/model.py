"""Swin-tiny backbone wrapper: pooled features, regression head, checkpoints.

The backbone is torchvision's swin_t.  Feature extraction runs the
convolutional/attention stages and spatially average-pools the final feature
map into one vector per canvas; scoring feeds that vector through a small
two-layer rectifier head.  Checkpoints carry a format version and the
backbone identifier so a stale or foreign file fails with a clear message.
"""

from __future__ import annotations

import sys

import torch
from torch import nn
from torchvision.models import swin_t

from .errors import CheckpointError, QABackendError

BACKBONE_ID = "swin_t"
EXTRACTOR_ID = "swin-t-pooled-v1"
CHECKPOINT_VERSION = 1

# Forward cost of the tiny backbone on one 224x224 canvas, in Gflops.  Window
# attention is linear in token count, so other canvas sizes scale by pixel
# count; the reported total is therefore proportional to the number of
# same-size canvases processed.
GFLOPS_PER_224_CANVAS = 4.374

_IMAGENET_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
_IMAGENET_STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)


def build_backbone(init: str = "imagenet", seed: int = 0) -> tuple[nn.Module, str]:
    """Construct the backbone; returns (module, actual_init).

    `imagenet` asks for the pretrained weights and falls back to a seeded
    random initialization (with a stderr warning) when they cannot be
    fetched, so offline runs still work end to end.
    """
    if init not in ("imagenet", "random"):
        raise QABackendError(f"unknown init {init!r} (expected imagenet or random)")
    if init == "imagenet":
        try:
            from torchvision.models import Swin_T_Weights

            return swin_t(weights=Swin_T_Weights.IMAGENET1K_V1), "imagenet"
        except Exception as exc:
            print(
                f"warning: pretrained weights unavailable ({exc}); "
                "falling back to seeded random initialization",
                file=sys.stderr,
            )
    torch.manual_seed(seed)
    return swin_t(weights=None), "random"


def feature_dim(backbone: nn.Module) -> int:
    """Channel count of the final stage, discovered from the architecture."""
    return int(backbone.head.in_features)


def normalize_batch(batch: torch.Tensor) -> torch.Tensor:
    """Standard ImageNet channel normalization of a (B, 3, H, W) float batch."""
    return (batch - _IMAGENET_MEAN) / _IMAGENET_STD


def pooled_features(backbone: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Final-stage feature maps, spatially average-pooled to (B, dim)."""
    x = backbone.features(batch)
    x = backbone.norm(x)
    x = x.permute(0, 3, 1, 2)
    x = backbone.avgpool(x)
    return torch.flatten(x, 1)


class RegressionHead(nn.Module):
    """dim -> hidden -> 1 with a rectifier, mirroring the primary's head."""

    def __init__(self, dim: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x))).squeeze(-1)


class ScoringModel(nn.Module):
    """Backbone plus head: one quality score per canvas."""

    def __init__(self, backbone: nn.Module, hidden: int = 128):
        super().__init__()
        self.backbone = backbone
        self.head = RegressionHead(feature_dim(backbone), hidden)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.head(pooled_features(self.backbone, batch))


def params_m(module: nn.Module) -> float:
    return sum(p.numel() for p in module.parameters()) / 1e6


def gflops_for_canvases(sizes: list[tuple[int, int]]) -> float:
    """Reported compute for a batch of (height, width) canvases."""
    return float(
        sum(GFLOPS_PER_224_CANVAS * (h * w) / (224 * 224) for h, w in sizes)
    )


def save_checkpoint(model: ScoringModel, path, init_tag: str) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "backbone": BACKBONE_ID,
            "dim": feature_dim(model.backbone),
            "hidden": model.head.fc1.out_features,
            "init": init_tag,
            "state": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> tuple[ScoringModel, dict]:
    try:
        doc = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}")
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError(f"{path} is not a backend checkpoint")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {doc['format_version']} unsupported; "
            f"this backend reads version {CHECKPOINT_VERSION}"
        )
    if doc.get("backbone") != BACKBONE_ID:
        raise CheckpointError(
            f"checkpoint built for backbone {doc.get('backbone')!r}; "
            f"this backend runs {BACKBONE_ID!r}"
        )
    backbone, _ = build_backbone("random", seed=0)
    model = ScoringModel(backbone, hidden=int(doc.get("hidden", 128)))
    try:
        model.load_state_dict(doc["state"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint state does not fit the model: {exc}")
    model.eval()
    meta = {k: doc[k] for k in ("format_version", "backbone", "dim", "hidden", "init")}
    return model, meta

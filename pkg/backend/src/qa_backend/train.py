"""End-to-end training of the scoring model on labelled canvas sets.

A training manifest groups canvases by source model and attaches one label
per model; the loss compares the mean predicted score of a model's canvases
against that label.  The schedule is Adam at 1e-4, decayed by 0.9 every five
epochs, batch size 32 items, fifty epochs — overridable per run.  With
`freeze_backbone` the backbone runs once to cache pooled features and only
the head trains, which is the fast path for smoke tests on CPU.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import QABackendError
from .model import ScoringModel, build_backbone, pooled_features
from .runner import _BATCH


@dataclass(frozen=True)
class BackendConfig:
    init: str = "imagenet"
    device: str = "cpu"
    batch_size: int = 32
    lr: float = 1e-4
    decay: float = 0.9
    decay_every: int = 5
    epochs: int = 50
    hidden: int = 128
    seed: int = 0
    freeze_backbone: bool = False
    max_steps: int | None = None
    val_fraction: float = 0.2


@dataclass(frozen=True)
class TrainItem:
    item_id: str
    mos: float
    canvases: tuple[Path, ...]
    split: str = ""  # "", "train", or "val"; set when the caller pins the split


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    steps: int = 0
    train_items: list[str] = field(default_factory=list)
    val_items: list[str] = field(default_factory=list)


def read_train_manifest(path) -> list[TrainItem]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise QABackendError(f"cannot read training manifest: {exc}")
    except json.JSONDecodeError as exc:
        raise QABackendError(f"training manifest is not valid JSON: {exc}")
    raw = doc.get("items")
    if not isinstance(raw, list) or len(raw) < 2:
        raise QABackendError("training manifest needs at least 2 items")
    items = []
    for i, ent in enumerate(raw):
        try:
            canvases = tuple(
                (path.parent / c).resolve() for c in ent["canvases"]
            )
            if not canvases:
                raise KeyError("canvases")
            split = str(ent.get("split", ""))
            if split not in ("", "train", "val"):
                raise ValueError(f"split must be train or val, not {split!r}")
            items.append(
                TrainItem(
                    item_id=str(ent.get("item_id", f"item_{i}")),
                    mos=float(ent["mos"]),
                    canvases=canvases,
                    split=split,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise QABackendError(f"training manifest item {i} is malformed: {exc}")
    return items


def _load_item_tensors(items: list[TrainItem]) -> list[torch.Tensor]:
    """One stacked (n_canvases, 3, H, W) tensor per item."""
    from .bridge import load_canvas

    return [torch.stack([load_canvas(p) for p in it.canvases]) for it in items]


def _item_means(model: ScoringModel, stacks, idxs, frozen_feats) -> torch.Tensor:
    """Mean predicted score per item for the given item indices."""
    means = []
    for i in idxs:
        if frozen_feats is not None:
            scores = model.head(frozen_feats[i])
        else:
            scores = model(stacks[i])
        means.append(scores.mean())
    return torch.stack(means)


def train_model(
    items: list[TrainItem], cfg: BackendConfig
) -> tuple[ScoringModel, TrainReport]:
    if len(items) < 2:
        raise QABackendError("need at least 2 training items")
    torch.manual_seed(cfg.seed)
    backbone, _init = build_backbone(cfg.init, seed=cfg.seed)
    model = ScoringModel(backbone, hidden=cfg.hidden).to(cfg.device)

    stacks = _load_item_tensors(items)
    labels = torch.tensor([it.mos for it in items], dtype=torch.float32)

    frozen_feats = None
    if cfg.freeze_backbone:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
        model.backbone.eval()
        frozen_feats = []
        with torch.no_grad():
            for stack in stacks:
                chunks = [
                    pooled_features(model.backbone, stack[s : s + _BATCH])
                    for s in range(0, len(stack), _BATCH)
                ]
                frozen_feats.append(torch.cat(chunks))

    # Split resolution: explicit per-item marks (a fold plan pinned by the
    # caller) win over the fraction split.  An empty validation side means the
    # training items double as the validation set (the overfit case).
    gen = torch.Generator().manual_seed(cfg.seed)
    if any(it.split for it in items):
        train_idx = [i for i, it in enumerate(items) if it.split != "val"]
        val_idx = [i for i, it in enumerate(items) if it.split == "val"]
        if not train_idx:
            raise QABackendError("every item is marked val; nothing to train on")
        if not val_idx:
            val_idx = train_idx
    else:
        order = torch.randperm(len(items), generator=gen).tolist()
        n_val = int(round(cfg.val_fraction * len(items)))
        if n_val == 0 or n_val >= len(items):
            train_idx, val_idx = order, order
        else:
            val_idx, train_idx = order[:n_val], order[n_val:]

    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=cfg.lr)
    report = TrainReport(
        train_items=[items[i].item_id for i in sorted(train_idx)],
        val_items=[items[i].item_id for i in sorted(val_idx)],
    )
    best_state = None

    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.decay ** (epoch // cfg.decay_every)
        for group in opt.param_groups:
            group["lr"] = lr

        model.head.train()
        if not cfg.freeze_backbone:
            model.backbone.train()
        perm = torch.randperm(len(train_idx), generator=gen).tolist()
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [train_idx[j] for j in perm[start : start + cfg.batch_size]]
            preds = _item_means(model, stacks, batch, frozen_feats)
            loss = torch.mean((preds - labels[batch]) ** 2)
            if not torch.isfinite(loss):
                raise QABackendError(
                    f"non-finite training loss at epoch {epoch}; lower the learning rate"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
            report.steps += 1
            if cfg.max_steps is not None and report.steps >= cfg.max_steps:
                break
        report.train_losses.append(epoch_loss / max(n_batches, 1))

        model.eval()
        with torch.no_grad():
            preds = _item_means(model, stacks, val_idx, frozen_feats)
            val = float(torch.mean((preds - labels[val_idx]) ** 2))
        report.val_losses.append(val)
        if val < report.best_val_loss:
            report.best_val_loss = val
            report.best_epoch = epoch
            best_state = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
        if cfg.max_steps is not None and report.steps >= cfg.max_steps:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, report

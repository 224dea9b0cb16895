"""Per-projection quality regression head, aggregation, and head training.

The head is a two-stage fully-connected map: score = W2 @ relu(W1 @ f + b1)
+ b2, with a hidden width of 128 by default.  A model's quality is the plain
mean of its per-projection scores.  Training minimizes the mean squared
error between that per-item mean and the label, with adaptive-moment
mini-batch updates; a guarded plain-descent mode exists for the
deterministic loss-monotonicity checks.

Weights are stored as float32 (quantized on construction), so a saved file
reloads to bit-identical parameters and identical scores.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ScoringError, TrainingError
from .features import FeatureVector
from .projection import ViewpointId
from .sampling import Rng

WEIGHTS_SCHEMA_VERSION = 1


def _as_f32_exact(arr, shape) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32).astype(np.float64)
    if arr.size != int(np.prod(shape)):
        raise ScoringError(f"head weight shape mismatch: got {arr.shape}, want {shape}")
    out = arr.reshape(shape)
    if not np.all(np.isfinite(out)):
        raise ScoringError("head weights contain non-finite values")
    return out


@dataclass
class HeadWeights:
    """Parameters of the two-stage FC head, tagged with the extractor they fit.

    Arrays are held as float64 but quantized to float32-representable values,
    which makes serialization exact.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float
    extractor_id: str

    def __post_init__(self):
        W1 = np.asarray(self.W1, dtype=np.float64)
        if W1.ndim != 2:
            raise ScoringError(f"W1 must be 2-D, got shape {W1.shape}")
        hidden, dim = W1.shape
        self.W1 = _as_f32_exact(W1, (hidden, dim))
        self.b1 = _as_f32_exact(self.b1, (hidden,))
        self.W2 = _as_f32_exact(self.W2, (1, hidden))
        self.b2 = float(np.float32(self.b2))
        if not np.isfinite(self.b2):
            raise ScoringError("head weights contain non-finite values")
        if not self.extractor_id:
            raise ScoringError("head weights must name their extractor")

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W1.shape[1]


def init_head(dim: int, hidden: int, rng: Rng, extractor_id: str) -> HeadWeights:
    """Symmetric uniform initialization in +-sqrt(6/(fan_in+fan_out))."""
    if dim < 1 or hidden < 1:
        raise ScoringError("head dimensions must be positive")
    lim1 = np.sqrt(6.0 / (dim + hidden))
    lim2 = np.sqrt(6.0 / (hidden + 1))
    return HeadWeights(
        W1=rng.uniform(-lim1, lim1, (hidden, dim)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-lim2, lim2, (1, hidden)),
        b2=0.0,
        extractor_id=extractor_id,
    )


def _forward(X: np.ndarray, w: HeadWeights) -> np.ndarray:
    hidden = np.maximum(X @ w.W1.T + w.b1, 0.0)
    return hidden @ w.W2[0] + w.b2


def regress_quality(f: FeatureVector, w: HeadWeights) -> float:
    if f.dim != w.dim:
        raise ScoringError(
            f"feature dim {f.dim} does not match head dim {w.dim}"
        )
    if f.extractor_id != w.extractor_id:
        raise ScoringError(
            f"head was trained for extractor {w.extractor_id!r}, "
            f"features come from {f.extractor_id!r}"
        )
    return float(_forward(f.values[None, :], w)[0])


def score_projections(features: list[FeatureVector], w: HeadWeights) -> list[float]:
    return [regress_quality(f, w) for f in features]


def aggregate_scores(scores) -> float:
    scores = list(scores)
    if not scores:
        raise ScoringError("cannot aggregate an empty score list")
    return float(np.mean(scores))


@dataclass
class QualityResult:
    """Per-projection scores plus their mean, with reproduction provenance."""

    per_projection: list[float]
    aggregate: float
    viewpoints: list[ViewpointId]
    seed: int
    model_id: str = "model"

    def __post_init__(self):
        if not self.per_projection:
            raise ScoringError("quality result has no per-projection scores")
        mean = float(np.mean(self.per_projection))
        if abs(self.aggregate - mean) > 1e-9:
            raise ScoringError(
                f"aggregate {self.aggregate} is not the mean {mean} of its scores"
            )
        lo, hi = min(self.per_projection), max(self.per_projection)
        if not lo <= self.aggregate <= hi:
            raise ScoringError("aggregate lies outside the per-projection range")

    @classmethod
    def from_scores(cls, scores, viewpoints, seed, model_id="model"):
        scores = [float(s) for s in scores]
        return cls(scores, aggregate_scores(scores), list(viewpoints), seed, model_id)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "per_projection": self.per_projection,
            "aggregate": self.aggregate,
            "viewpoints": [vp.value for vp in self.viewpoints],
            "seed": self.seed,
        }


@dataclass(frozen=True)
class TrainConfig:
    """Training defaults: step 1e-4 decayed x0.9 every 5 epochs, batch 32,
    50 epochs, adaptive-moment updates."""

    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    decay: float = 0.9
    decay_every: int = 5
    hidden: int = 128
    seed: int = 0
    optimizer: str = "adam"
    guard: bool = False
    loss_on: str = "average"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise TrainingError("epochs, batch_size, and hidden must be positive")
        if self.lr <= 0 or not 0 < self.decay <= 1 or self.decay_every < 1:
            raise TrainingError("invalid learning-rate schedule")
        if self.optimizer not in ("adam", "gd"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_on not in ("average", "projection"):
            raise TrainingError(f"unknown loss_on mode {self.loss_on!r}")


@dataclass
class TrainResult:
    weights: HeadWeights
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0


class _Params:
    """Mutable float64 parameter state used only inside the trainer."""

    def __init__(self, w: HeadWeights):
        self.W1 = w.W1.copy()
        self.b1 = w.b1.copy()
        self.W2 = w.W2.copy()
        self.b2 = float(w.b2)
        self.extractor_id = w.extractor_id

    def snapshot(self):
        return copy.deepcopy(self)

    def to_weights(self) -> HeadWeights:
        return HeadWeights(self.W1, self.b1, self.W2, self.b2, self.extractor_id)


def _prepare_items(items):
    if len(items) < 2:
        raise TrainingError(f"need at least 2 training items, got {len(items)}")
    mats, labels = [], []
    extractor_id = None
    dim = None
    for vectors, label in items:
        vectors = list(vectors)
        if not vectors:
            raise TrainingError("training item has no feature vectors")
        for v in vectors:
            if extractor_id is None:
                extractor_id, dim = v.extractor_id, v.dim
            if v.extractor_id != extractor_id:
                raise TrainingError(
                    f"mixed extractors in training set: {extractor_id!r} vs "
                    f"{v.extractor_id!r}"
                )
            if v.dim != dim:
                raise TrainingError(
                    f"inconsistent feature dims in training set: {dim} vs {v.dim}"
                )
        label = float(label)
        if not np.isfinite(label):
            raise TrainingError("non-finite training label")
        mats.append(np.stack([v.values for v in vectors]))
        labels.append(label)
    return mats, np.asarray(labels), extractor_id, dim


def _batch_loss_and_grads(p: _Params, mats, labels, idx, loss_on):
    """Loss and analytic gradients for the items selected by `idx`."""
    X = np.concatenate([mats[i] for i in idx], axis=0)
    counts = np.array([mats[i].shape[0] for i in idx])
    item_of = np.repeat(np.arange(len(idx)), counts)
    y = labels[list(idx)]

    A = X @ p.W1.T + p.b1
    R = np.maximum(A, 0.0)
    q = R @ p.W2[0] + p.b2

    if loss_on == "average":
        sums = np.zeros(len(idx))
        np.add.at(sums, item_of, q)
        Q = sums / counts
        resid = Q - y
        loss = float(np.mean(resid**2))
        coeff = (2.0 * resid / len(idx) / counts)[item_of]
    else:
        resid = q - y[item_of]
        loss = float(np.mean(resid**2))
        coeff = 2.0 * resid / q.size

    dW2 = (coeff @ R)[None, :]
    db2 = float(coeff.sum())
    dA = np.outer(coeff, p.W2[0]) * (A > 0.0)
    dW1 = dA.T @ X
    db1 = dA.sum(axis=0)
    return loss, (dW1, db1, dW2, db2)


def _dataset_loss(p: _Params, mats, labels, loss_on) -> float:
    loss, _ = _batch_loss_and_grads(p, mats, labels, range(len(mats)), loss_on)
    return loss


class _Adam:
    def __init__(self, shapes):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list, grads: list, lr: float):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for i, (param, grad) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * grad
            self.v[i] = b2 * self.v[i] + (1 - b2) * grad * grad
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            param -= lr * mhat / (np.sqrt(vhat) + eps)


def fit_head(items, cfg: TrainConfig, val_items=None) -> TrainResult:
    """Train the head and return the best-validation weights with loss traces.

    When no validation items are supplied, the training loss doubles as the
    selection criterion.  In guarded mode (`cfg.guard`), an epoch whose
    training loss increases is rolled back and the step size halved, so the
    recorded loss trace is non-increasing.
    """
    mats, labels, extractor_id, dim = _prepare_items(items)
    if val_items is not None:
        vmats, vlabels, vext, vdim = _prepare_items(val_items)
        if (vext, vdim) != (extractor_id, dim):
            raise TrainingError("validation items do not match training extractor/dim")
    rng = Rng(cfg.seed)
    p = _Params(init_head(dim, cfg.hidden, rng, extractor_id))
    adam = _Adam([p.W1.shape, p.b1.shape, p.W2.shape, (1,)]) if cfg.optimizer == "adam" else None

    lr = cfg.lr
    prev_loss = np.inf
    best_loss = np.inf
    best_state = p.snapshot()
    best_epoch = 0
    train_losses: list[float] = []
    val_losses: list[float] = []

    for epoch in range(cfg.epochs):
        epoch_lr = lr * cfg.decay ** (epoch // cfg.decay_every)
        start_state = p.snapshot() if cfg.guard else None
        order = rng.permutation(len(mats))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, (dW1, db1, dW2, db2) = _batch_loss_and_grads(
                p, mats, labels, idx, cfg.loss_on
            )
            if not np.isfinite(loss):
                raise TrainingError(
                    f"training diverged: non-finite loss at epoch {epoch}"
                )
            if cfg.optimizer == "adam":
                grads = [dW1, db1, dW2, np.array([db2])]
                params = [p.W1, p.b1, p.W2]
                b2_arr = np.array([p.b2])
                adam.step(params + [b2_arr], grads, epoch_lr)
                p.b2 = float(b2_arr[0])
            else:
                p.W1 -= epoch_lr * dW1
                p.b1 -= epoch_lr * db1
                p.W2 -= epoch_lr * dW2
                p.b2 -= epoch_lr * db2

        epoch_loss = _dataset_loss(p, mats, labels, cfg.loss_on)
        if cfg.guard and epoch_loss > prev_loss:
            p = start_state
            lr *= 0.5
            epoch_loss = prev_loss
        prev_loss = epoch_loss
        train_losses.append(epoch_loss)

        if val_items is not None:
            select_loss = _dataset_loss(p, vmats, vlabels, cfg.loss_on)
            val_losses.append(select_loss)
        else:
            select_loss = epoch_loss
        if select_loss < best_loss:
            best_loss = select_loss
            best_state = p.snapshot()
            best_epoch = epoch

    return TrainResult(best_state.to_weights(), train_losses, val_losses, best_epoch)


def train_head(items, cfg: TrainConfig, val_items=None) -> HeadWeights:
    return fit_head(items, cfg, val_items).weights


def _fmt32(x: float) -> str:
    """Shortest decimal that round-trips the float32 value."""
    v = np.float32(x)
    pos = np.format_float_positional(v, unique=True, trim="0")
    sci = np.format_float_scientific(v, unique=True, trim="0")
    return sci if len(sci) < len(pos) else pos


def save_weights(w: HeadWeights, path) -> Path:
    path = Path(path)

    def vec(a):
        return "[" + ", ".join(_fmt32(v) for v in a) + "]"

    def mat(a):
        return "[" + ", ".join(vec(row) for row in a) + "]"

    text = (
        "{\n"
        f'  "schema_version": {WEIGHTS_SCHEMA_VERSION},\n'
        f'  "extractor_id": {json.dumps(w.extractor_id)},\n'
        f'  "hidden": {w.hidden},\n'
        f'  "dim": {w.dim},\n'
        f'  "W1": {mat(w.W1)},\n'
        f'  "b1": {vec(w.b1)},\n'
        f'  "W2": {mat(w.W2)},\n'
        f'  "b2": {_fmt32(w.b2)}\n'
        "}\n"
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def load_weights(path) -> HeadWeights:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ScoringError(f"weights not found: {path}")
    except json.JSONDecodeError as exc:
        raise ScoringError(f"corrupted weights file {path}: {exc}")
    for key in ("schema_version", "extractor_id", "hidden", "dim", "W1", "b1", "W2", "b2"):
        if key not in doc:
            raise ScoringError(f"weights file missing field {key!r}")
    if doc["schema_version"] != WEIGHTS_SCHEMA_VERSION:
        raise ScoringError(
            f"unsupported weights schema_version {doc['schema_version']!r}"
        )
    hidden, dim = int(doc["hidden"]), int(doc["dim"])
    try:
        W1 = np.asarray(doc["W1"], dtype=np.float64)
        b1 = np.asarray(doc["b1"], dtype=np.float64)
        W2 = np.asarray(doc["W2"], dtype=np.float64)
        b2 = float(doc["b2"])
    except (TypeError, ValueError) as exc:
        raise ScoringError(f"malformed weight arrays in {path}: {exc}")
    if W1.shape != (hidden, dim) or b1.shape != (hidden,) or W2.shape != (1, hidden):
        raise ScoringError(
            f"weight shapes {W1.shape}/{b1.shape}/{W2.shape} disagree with "
            f"declared hidden={hidden}, dim={dim}"
        )
    return HeadWeights(W1, b1, W2, b2, str(doc["extractor_id"]))

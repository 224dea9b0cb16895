"""Neural canvas backend: Swin-tiny features and scores over the JSON bridge."""

from .bridge import Manifest, load_canvas, read_manifest, write_reply
from .errors import CanvasError, CheckpointError, QABackendError
from .model import (
    BACKBONE_ID,
    CHECKPOINT_VERSION,
    EXTRACTOR_ID,
    GFLOPS_PER_224_CANVAS,
    RegressionHead,
    ScoringModel,
    build_backbone,
    feature_dim,
    gflops_for_canvases,
    load_checkpoint,
    params_m,
    pooled_features,
    save_checkpoint,
)
from .runner import extract_features, score_canvases
from .train import BackendConfig, TrainItem, TrainReport, read_train_manifest, train_model

__all__ = [
    "BACKBONE_ID",
    "BackendConfig",
    "CHECKPOINT_VERSION",
    "CanvasError",
    "CheckpointError",
    "EXTRACTOR_ID",
    "GFLOPS_PER_224_CANVAS",
    "Manifest",
    "QABackendError",
    "RegressionHead",
    "ScoringModel",
    "TrainItem",
    "TrainReport",
    "build_backbone",
    "extract_features",
    "feature_dim",
    "gflops_for_canvases",
    "load_canvas",
    "load_checkpoint",
    "params_m",
    "pooled_features",
    "read_manifest",
    "read_train_manifest",
    "save_checkpoint",
    "score_canvases",
    "train_model",
    "write_reply",
]

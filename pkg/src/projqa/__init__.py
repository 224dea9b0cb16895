"""projqa: no-reference quality assessment for 3D models via 2D projections.

A model is rendered from a random subset of the six cube-face viewpoints,
each projection is cropped and grid-sampled into a small canvas of local
mini-patches, features of every canvas are regressed to a per-projection
quality score, and the scores are averaged into the final estimate.
"""

from .bench import (
    BenchReport,
    StageClock,
    StageTimings,
    bench_table,
    compare_report,
    time_pipeline,
)
from .errors import (
    BenchError,
    BridgeError,
    ConfigError,
    EvaluationError,
    FeatureError,
    ModelIOError,
    ProjQAError,
    RenderError,
    SamplingError,
    ScoringError,
    TrainingError,
)
from .evaluation import (
    DatasetItem,
    EvalReport,
    FoldPlan,
    LogisticFit,
    aggregate_folds,
    evaluate_run,
    kfold_split,
    krcc,
    logistic_fit,
    plcc,
    read_dataset_manifest,
    report_json,
    report_table,
    rmse,
    srcc,
)
from .features import (
    BASELINE_DIM,
    BASELINE_EXTRACTOR_ID,
    BackendReply,
    ExtractorSpec,
    FeatureVector,
    baseline_features,
    extract_features,
    read_backend_reply,
    run_bridge,
    write_manifest,
)
from .model_io import (
    AABB,
    PointCloud,
    TexturedMesh,
    bounding_box,
    load_point_cloud,
    load_textured_mesh,
    save_point_cloud,
)
from .pipeline import (
    CrossValResult,
    PipelineConfig,
    PRESETS,
    ablate,
    cross_validate,
    dataset_features,
    fixed_viewpoint_sets,
    item_features,
    load_model,
    preset_config,
    run_scoring,
    sample_for_model,
    sweep_n,
)
from .projection import (
    Camera,
    ProjectionImage,
    RenderConfig,
    VIEWPOINTS,
    ViewpointId,
    crop_background,
    export_projection,
    render_mesh,
    render_model,
    render_point_cloud,
    render_selected,
    viewpoint_camera,
)
from .sampling import (
    DEFAULT_GRID,
    GridSpec,
    Rng,
    SampledProjectionSet,
    apply_grid_sampling,
    grid_mini_patch,
    nearest_upscale,
    sample_projection_set,
    sample_viewpoints,
)
from .scoring import (
    HeadWeights,
    QualityResult,
    TrainConfig,
    TrainResult,
    aggregate_scores,
    fit_head,
    init_head,
    load_weights,
    regress_quality,
    save_weights,
    train_head,
)

__version__ = "0.1.0"

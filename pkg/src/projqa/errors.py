"""Exception hierarchy shared by all projqa modules."""


class ProjQAError(Exception):
    """Base class for all errors raised by this package."""


class ModelIOError(ProjQAError):
    """3D model file could not be parsed or validated."""


class RenderError(ProjQAError):
    """Projection rendering or cropping failed."""


class SamplingError(ProjQAError):
    """Viewpoint or grid mini-patch sampling failed."""


class FeatureError(ProjQAError):
    """Feature extraction failed."""


class BridgeError(FeatureError):
    """The external feature backend failed or returned a malformed reply."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class ScoringError(ProjQAError):
    """Quality regression, aggregation, or weight (de)serialization failed."""


class TrainingError(ProjQAError):
    """Head training diverged or was misconfigured."""


class EvaluationError(ProjQAError):
    """Metric computation or cross-validation setup failed."""


class BenchError(ProjQAError):
    """Benchmark harness failure; carries the failing stage name."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class ConfigError(ProjQAError):
    """Invalid user-supplied configuration (CLI exit code 2)."""

class QABackendError(Exception):
    """Any backend failure: bad manifests, checkpoints, or training."""


class CheckpointError(QABackendError):
    """Checkpoint missing, unreadable, or built for a different backbone."""


class CanvasError(QABackendError):
    """One or more canvases could not be processed; details per entry."""

    def __init__(self, message: str, failed: list[str] | None = None):
        super().__init__(message)
        self.failed = failed or []

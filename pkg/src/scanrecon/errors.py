"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ReconError(Exception):
    exit_code = 1


class ConfigError(ReconError):
    exit_code = 2


class DataError(ReconError):
    exit_code = 3


class ConvergenceError(ReconError):
    exit_code = 4


class ExternalToolError(ReconError):
    exit_code = 5


class StageError(ReconError):
    """Wraps a failure raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)

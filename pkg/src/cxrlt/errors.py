"""Exception types raised across the package."""


class CxrltError(Exception):
    pass


class ConfigError(CxrltError, ValueError):
    pass


class LookupFailure(CxrltError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class SchemaError(CxrltError, ValueError):
    pass


class ManifestRowError(SchemaError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class SplitError(CxrltError, ValueError):
    pass


class IncompatibleError(CxrltError, ValueError):
    pass


class ValidationError(CxrltError, ValueError):
    def __init__(self, message: str, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class CoverageError(CxrltError, ValueError):
    pass


class ContractError(CxrltError, ValueError):
    pass


class ImageLoadError(CxrltError, OSError):
    def __init__(self, image_ref: str, reason: str = ""):
        super().__init__(f"cannot load image {image_ref!r}: {reason}" if reason else f"cannot load image {image_ref!r}")
        self.image_ref = image_ref


class CheckpointLoadError(CxrltError, ValueError):
    pass


class TrainingDivergedError(CxrltError, RuntimeError):
    def __init__(self, message: str, postmortem=None):
        super().__init__(message)
        self.postmortem = postmortem


class StageFailure(CxrltError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage

"""Exception hierarchy. Each family maps onto a CLI exit code."""


class GreatError(Exception):
    exit_code = 1


class ValidationError(GreatError):
    """Bad input data: manifests, annotation files, configs."""


class FormatError(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, raw=None, line=None):
        super().__init__(message)
        self.raw = raw
        self.line = line


class ConfigError(ValidationError):
    pass


class SamplingError(GreatError):
    pass


class GenerationError(GreatError):
    pass


class ShapeError(GreatError, ValueError):
    pass


class EncodingError(GreatError, ValueError):
    pass


class DomainError(GreatError, ValueError):
    pass


class UndefinedMetricError(GreatError, ValueError):
    pass


class PreconditionError(GreatError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class BackendError(GreatError):
    exit_code = 2

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class FixtureMissError(BackendError):
    def __init__(self, image_id):
        super().__init__(f"no fixture answers for image {image_id!r}")
        self.image_id = image_id


class ProtocolError(BackendError):
    pass


class DivergenceError(GreatError):
    exit_code = 3

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class StageError(GreatError):
    """Wraps an error raised inside one stage of the forward pass."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)

class SGSegException(Exception):
    pass


class SGSegFormatException(SGSegException):
    pass


class UsageException(SGSegException):
    pass


class DataValidationException(SGSegException):
    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = list(errors or [])


class NumericException(SGSegException):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class GradientCheckException(NumericException):
    pass


class CheckpointException(SGSegException):
    code = "checkpoint-error"


class CheckpointVersionError(CheckpointException):
    code = "version-mismatch"


class CheckpointTruncatedError(CheckpointException):
    code = "truncated-payload"


class CheckpointShapeError(CheckpointException):
    code = "shape-mismatch"


class ShapeException(SGSegException):
    pass

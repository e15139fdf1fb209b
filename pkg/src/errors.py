class LabError(Exception):
    """
    Base class for every failure the lab reports as a runtime error.
    """


class SourceParseError(LabError, ValueError):
    """
    Malformed or invalid source markup. Carries the 1-based position.
    """

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f'{message} (line {line}, column {column})'
        super().__init__(message)


class ConfigError(LabError, ValueError):
    pass


class ShapeError(LabError, ValueError):
    pass


class VocabularyError(LabError, ValueError):
    pass


class MaskingError(LabError, ValueError):
    pass


class DatasetError(LabError, ValueError):
    pass


class CheckpointError(LabError):
    pass


class TrainingAborted(LabError):
    """
    Raised when training hits a non-finite loss or gradient.
    """

    def __init__(self, message, step, last_checkpoint=None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        super().__init__(f'{message} at step {step}; last good checkpoint: {last_checkpoint}')

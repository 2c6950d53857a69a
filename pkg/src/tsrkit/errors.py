"""Exception hierarchy. ``TsrkitError`` marks problems with user data or files."""


class TsrkitError(Exception):
    pass


class DatasetError(TsrkitError, ValueError):
    pass


class ModelError(TsrkitError, ValueError):
    pass


class ShapeMismatch(ModelError):
    def __init__(self, message: str, layer_index: int | None = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class EvaluationError(TsrkitError, ValueError):
    pass

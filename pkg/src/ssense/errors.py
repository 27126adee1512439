"""Exception hierarchy shared across the pipeline.

``ValidationError`` covers bad inputs (files, configs, contracts) and maps to
exit code 1 in the CLI; everything else derived from ``SsenseError`` is a
runtime failure (exit code 2).
"""


class SsenseError(Exception):
    pass


class ValidationError(SsenseError, ValueError):
    pass


class DimensionMismatchError(ValidationError):
    pass


class NonFiniteError(ValidationError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class WindowError(ValidationError):
    pass


class DigestMismatchError(ValidationError):
    pass


class DegenerateEmbeddingError(SsenseError, ArithmeticError):
    pass


class NonFiniteActivationError(SsenseError, ArithmeticError):
    def __init__(self, layer):
        super().__init__(f"non-finite activations in layer {layer!r}")
        self.layer = layer


class EmbeddingFetchError(SsenseError, RuntimeError):
    pass

"""Contrastive retrieval of sentence embeddings from intracranial recordings."""
from .errors import (DegenerateEmbeddingError, DigestMismatchError, DimensionMismatchError,
                     EmbeddingFetchError, NonFiniteActivationError, NonFiniteError, SsenseError,
                     ValidationError, WindowError)

__version__ = "0.1.0"

__all__ = [
    "DegenerateEmbeddingError", "DigestMismatchError", "DimensionMismatchError",
    "EmbeddingFetchError", "NonFiniteActivationError", "NonFiniteError", "SsenseError",
    "ValidationError", "WindowError", "__version__",
]

"""Frozen 512-d sentence embeddings: SSTX files and a remote JSON provider.

Vectors are held as float32, the storage precision. Loading renormalises
any vector whose norm is off by more than float32 rounding. Vectors that are
already unit norm are left alone, so save -> load is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from ._binio import Reader, Writer
from .errors import DimensionMismatchError, EmbeddingFetchError, ValidationError

log = logging.getLogger(__name__)

EMBED_DIM = 512
TEXT_MAGIC = b"SSTX"
TEXT_VERSION = 1
MAX_BATCH = 64
NORM_TOL = 1e-6
ENDPOINT_ENV = "SSENSE_EMBED_ENDPOINT"


@dataclass
class SentenceEmbeddingSet:
    sentences: list[str]
    vectors: np.ndarray  # (n, 512) float32, unit rows
    source_tag: str = ""

    def __post_init__(self):
        self.vectors = normalize_rows(self.vectors)
        if len(self.sentences) != self.vectors.shape[0]:
            raise DimensionMismatchError(
                f"{len(self.sentences)} sentences but {self.vectors.shape[0]} vectors")

    def lookup(self, texts: Sequence[str]) -> np.ndarray:
        """Vectors for ``texts`` (float64), raising on any sentence without one."""
        index = {s: i for i, s in enumerate(self.sentences)}
        missing = [t for t in texts if t not in index]
        if missing:
            raise ValidationError(
                f"{len(missing)} sentences have no embedding (first: {missing[0]!r})")
        return self.vectors[[index[t] for t in texts]].astype(np.float64)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.vectors).tobytes()).hexdigest()


def normalize_rows(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != EMBED_DIM:
        raise DimensionMismatchError(f"embeddings must be (n, {EMBED_DIM}), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("embeddings contain non-finite values")
    norms = np.linalg.norm(v, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(f"embedding {int(zero[0])} is the zero vector; cannot normalise")
    off = np.abs(norms - 1.0) > NORM_TOL
    v[off] /= norms[off, None]
    return v.astype(np.float32)


def save_embeddings(emb: SentenceEmbeddingSet, path) -> None:
    with Path(path).open("wb") as fh:
        w = Writer(fh)
        w.magic(TEXT_MAGIC, TEXT_VERSION)
        w.u32(len(emb.sentences))
        w.u32(EMBED_DIM)
        w.f32_array(emb.vectors)
        for s in emb.sentences:
            w.text(s)
        w.text(emb.source_tag)


def load_embeddings(path) -> SentenceEmbeddingSet:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"embeddings file not found: {path}")
    r = Reader(path.read_bytes(), str(path))
    r.magic(TEXT_MAGIC, (TEXT_VERSION,))
    count, dim = r.u32(), r.u32()
    if dim != EMBED_DIM:
        raise DimensionMismatchError(f"{path}: embedding dim {dim}, expected {EMBED_DIM}")
    vectors = r.f32_array((count, dim))
    sentences = [r.text() for _ in range(count)]
    tag = r.text()
    r.done()
    return SentenceEmbeddingSet(sentences, vectors, tag)


def _cache_key(endpoint: str, sentences: Sequence[str]) -> str:
    payload = json.dumps({"endpoint": endpoint, "sentences": list(sentences)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def fetch_remote(endpoint: str, sentences: Sequence[str], timeout_s: float = 30.0,
                 cache_dir=None, session: requests.Session | None = None) -> SentenceEmbeddingSet:
    """POST sentences in batches of <= 64 to ``endpoint``.

    The server must answer each ``{"sentences": [...]}`` with
    ``{"vectors": [[512 floats], ...]}`` in request order. Any batch failure
    aborts the whole call. Results are cached under ``cache_dir`` keyed by
    a hash of (endpoint, sentences).
    """
    sentences = list(sentences)
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"{_cache_key(endpoint, sentences)}.sstx"
        if cache_path.is_file():
            log.debug("embedding cache hit %s", cache_path.name)
            return load_embeddings(cache_path)

    http = session or requests.Session()
    chunks = []
    for start in range(0, len(sentences), MAX_BATCH):
        batch = sentences[start:start + MAX_BATCH]
        try:
            resp = http.post(endpoint, json={"sentences": batch}, timeout=timeout_s)
            resp.raise_for_status()
            body = resp.json()
        except requests.Timeout as exc:
            raise EmbeddingFetchError(f"{endpoint}: timed out after {timeout_s}s") from exc
        except (requests.RequestException, ValueError) as exc:
            raise EmbeddingFetchError(f"{endpoint}: request failed ({exc})") from exc
        vecs = body.get("vectors") if isinstance(body, dict) else None
        if not isinstance(vecs, list):
            raise EmbeddingFetchError(f"{endpoint}: malformed response, no 'vectors' list")
        if len(vecs) != len(batch):
            raise EmbeddingFetchError(
                f"{endpoint}: got {len(vecs)} vectors for {len(batch)} sentences")
        try:
            arr = np.asarray(vecs, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise EmbeddingFetchError(f"{endpoint}: malformed vectors ({exc})") from exc
        if arr.shape != (len(batch), EMBED_DIM) or not np.all(np.isfinite(arr)):
            raise EmbeddingFetchError(
                f"{endpoint}: vectors must be finite with shape ({len(batch)}, {EMBED_DIM}), "
                f"got {arr.shape}")
        chunks.append(arr)

    vectors = np.concatenate(chunks) if chunks else np.empty((0, EMBED_DIM))
    emb = SentenceEmbeddingSet(sentences, vectors, source_tag=f"remote:{endpoint}")
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        save_embeddings(emb, cache_path)
    return emb


def resolve_provider(embeddings_path=None, endpoint=None) -> tuple[str, str]:
    """Pick ("file", path) or ("remote", url); the environment is the fallback."""
    if embeddings_path and endpoint:
        raise ValidationError("--embeddings and --embed-endpoint are mutually exclusive")
    if embeddings_path:
        return "file", str(embeddings_path)
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
    if endpoint:
        return "remote", endpoint
    raise ValidationError(
        f"no embedding source: pass --embeddings, --embed-endpoint or set {ENDPOINT_ENV}")

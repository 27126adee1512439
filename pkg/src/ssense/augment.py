"""Training-time masking of (B, E, C, F, T) spectrogram batches.

Index sets are drawn without replacement, so each item gets exactly
floor(ratio * dim) masked rows / columns / electrodes. Each item draws its own
sets. Frequency and time masks are shared across that item's electrodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class MaskConfig:
    r_f: float = 0.0
    r_t: float = 0.0
    r_e: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("r_f", "r_t", "r_e"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValidationError(f"augment.{name} must lie in [0, 1], got {r}")

    @property
    def enabled(self) -> bool:
        return self.r_f > 0 or self.r_t > 0 or self.r_e > 0


def n_masked(ratio: float, dim: int) -> int:
    return math.floor(ratio * dim)


def _check(x):
    if x.ndim != 5:
        raise ValidationError(f"expected a (B, E, C, F, T) batch, got shape {x.shape}")


def draw_tf_indices(shape, r_f, r_t, rng):
    """Per-item (freq_idx, time_idx) arrays; empty where the ratio is 0."""
    b, _, _, f, t = shape
    empty = np.empty(0, dtype=np.intp)
    draws = []
    for _ in range(b):
        fi = rng.choice(f, n_masked(r_f, f), replace=False) if r_f > 0 else empty
        ti = rng.choice(t, n_masked(r_t, t), replace=False) if r_t > 0 else empty
        draws.append((np.sort(fi), np.sort(ti)))
    return draws


def draw_electrode_indices(shape, r, rng):
    b, e = shape[:2]
    return [np.sort(rng.choice(e, n_masked(r, e), replace=False)) for _ in range(b)]


def apply_tf_mask(x: np.ndarray, draws) -> np.ndarray:
    out = np.array(x, copy=True)
    for b, (fi, ti) in enumerate(draws):
        out[b, :, :, fi, :] = 0
        out[b, :, :, :, ti] = 0
    return out


def apply_electrode_mask(x: np.ndarray, draws) -> np.ndarray:
    out = np.array(x, copy=True)
    for b, ei in enumerate(draws):
        out[b, ei] = 0
    return out


def tf_mask(x: np.ndarray, r_f: float, r_t: float, rng: np.random.Generator) -> np.ndarray:
    """Zero random frequency rows and time columns per item."""
    _check(x)
    if r_f == 0 and r_t == 0:
        return x
    return apply_tf_mask(x, draw_tf_indices(x.shape, r_f, r_t, rng))


def electrode_mask(x: np.ndarray, r: float, rng: np.random.Generator) -> np.ndarray:
    """Zero floor(r * E) whole electrode slices per item."""
    _check(x)
    if r == 0:
        return x
    return apply_electrode_mask(x, draw_electrode_indices(x.shape, r, rng))


def apply_masks(x: np.ndarray, cfg: MaskConfig, rng: np.random.Generator) -> np.ndarray:
    x = electrode_mask(x, cfg.r_e, rng)
    return tf_mask(x, cfg.r_f, cfg.r_t, rng)

"""Morlet scalograms and adaptive multiplicative superlets.

All convolutions are zero-extended with "same" alignment: output sample ``n``
is centred on input sample ``n``. Kernels always have odd length, so the
centre is well defined. Columns are kept every ``decimation`` samples,
starting at 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import fft as sp_fft

from ._binio import Reader, Writer, canonical_json, digest
from .errors import ValidationError

SPECTRO_MAGIC = b"SSEN"
SPECTRO_VERSION = 1

# envelope SD = cycles / (2*pi*K_SD*f); support truncated at +-SUPPORT_SDS SDs
K_SD = 1.0
SUPPORT_SDS = 3.0
STANDARDIZE_EPS = 1e-6


def default_freqs() -> tuple[float, ...]:
    return tuple(float(f) for f in np.geomspace(2.0, 200.0, 40))


@dataclass(frozen=True)
class SuperletConfig:
    freqs_hz: tuple[float, ...] = field(default_factory=default_freqs)
    base_cycles: float = 3.0
    order_min: int = 1
    order_max: int = 7
    decimation: int = 32
    sample_rate_hz: float = 2048.0

    def __post_init__(self):
        object.__setattr__(self, "freqs_hz", tuple(float(f) for f in self.freqs_hz))
        self.validate()

    def validate(self):
        f = np.asarray(self.freqs_hz)
        if f.size == 0:
            raise ValidationError("superlet: empty frequency grid")
        if np.any(np.diff(f) <= 0):
            raise ValidationError("superlet: frequencies must be strictly increasing")
        if f[0] <= 0:
            raise ValidationError("superlet: frequencies must be positive")
        if f[-1] >= self.sample_rate_hz / 2:
            raise ValidationError(
                f"superlet: frequency {f[-1]} Hz at or above Nyquist ({self.sample_rate_hz / 2} Hz)")
        if self.base_cycles <= 0:
            raise ValidationError("superlet: base_cycles must be positive")
        if not (1 <= self.order_min <= self.order_max):
            raise ValidationError("superlet: need 1 <= order_min <= order_max")
        if self.decimation < 1:
            raise ValidationError("superlet: decimation must be >= 1")

    def orders(self) -> np.ndarray:
        """Adaptive order per frequency, linear in f, rounded half up."""
        f = np.asarray(self.freqs_hz)
        if f.size == 1 or self.order_max == self.order_min:
            return np.full(f.size, self.order_min, dtype=int)
        frac = (f - f[0]) / (f[-1] - f[0])
        return (self.order_min + np.floor((self.order_max - self.order_min) * frac + 0.5)).astype(int)

    def n_columns(self, n_samples: int) -> int:
        return -(-n_samples // self.decimation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freqs_hz"] = list(self.freqs_hz)
        return d

    def digest(self) -> str:
        return digest(self.to_dict())


@dataclass
class Spectrogram:
    values: np.ndarray  # (F, T)
    freqs_hz: tuple[float, ...]
    hop: int


def morlet_kernel(f: float, cycles: float, sr: float) -> np.ndarray:
    """Complex Morlet wavelet with unit L2 norm and zero mean."""
    if f <= 0:
        raise ValidationError(f"morlet: frequency must be positive, got {f}")
    if f >= sr / 2:
        raise ValidationError(f"morlet: frequency {f} Hz at or above Nyquist ({sr / 2} Hz)")
    if cycles < 1:
        raise ValidationError(f"morlet: need cycles >= 1, got {cycles}")
    sd = cycles / (2 * math.pi * K_SD * f)
    half = int(math.floor(SUPPORT_SDS * sd * sr))
    t = np.arange(-half, half + 1) / sr
    env = np.exp(-0.5 * (t / sd) ** 2)
    carrier = np.exp(2j * np.pi * f * t)
    # real because env is even and the odd sine part cancels
    kappa = np.sum(env * carrier).real / np.sum(env)
    psi = env * (carrier - kappa)
    return psi / np.linalg.norm(psi)


class _WaveletBank:
    """Kernel spectra for every (frequency, cycles) pair at one FFT size."""

    def __init__(self, cfg: SuperletConfig, n_samples: int, cycles_per_freq: Sequence[Sequence[float]]):
        self.cfg = cfg
        self.n = n_samples
        self.kernels = [[morlet_kernel(f, c, cfg.sample_rate_hz) for c in cs]
                        for f, cs in zip(cfg.freqs_hz, cycles_per_freq)]
        kmax = max(len(k) for row in self.kernels for k in row)
        self.nfft = sp_fft.next_fast_len(n_samples + kmax - 1)
        self.spectra = [[sp_fft.fft(k, self.nfft) for k in row] for row in self.kernels]
        self.cols = np.arange(cfg.n_columns(n_samples)) * cfg.decimation

    def magnitudes(self, sig_fft: np.ndarray, fi: int, ci: int) -> np.ndarray:
        """|x * psi| at the kept columns for all rows of ``sig_fft``."""
        half = (len(self.kernels[fi][ci]) - 1) // 2
        full = sp_fft.ifft(sig_fft * self.spectra[fi][ci], axis=-1)
        return np.abs(full[..., half + self.cols])


def _check_signals(signals: np.ndarray) -> np.ndarray:
    signals = np.asarray(signals, dtype=np.float64)
    if signals.shape[-1] == 0:
        raise ValidationError("superlet: empty segment")
    if not np.all(np.isfinite(signals)):
        raise ValidationError("superlet: non-finite samples in segment")
    return signals


def _scalogram_many(signals: np.ndarray, cfg: SuperletConfig, cycles_per_freq) -> np.ndarray:
    bank = _WaveletBank(cfg, signals.shape[-1], [[c] for c in cycles_per_freq])
    sig_fft = sp_fft.fft(signals, bank.nfft, axis=-1)
    out = np.empty(signals.shape[:-1] + (len(cfg.freqs_hz), len(bank.cols)))
    for fi in range(len(cfg.freqs_hz)):
        out[..., fi, :] = bank.magnitudes(sig_fft, fi, 0)
    return out


def geometric_mean(stack: np.ndarray) -> np.ndarray:
    """Geometric mean over axis 0, computed in log space.

    Exact zeros give zero; the result is clipped into [min, max] of the stack
    so rounding in exp/log cannot leave the bracket.
    """
    if stack.shape[0] == 1:
        return stack[0].copy()
    lo, hi = stack.min(axis=0), stack.max(axis=0)
    with np.errstate(divide="ignore"):
        logs = np.log(stack)
    out = np.exp(logs.mean(axis=0))
    out = np.where(lo > 0, out, 0.0)
    return np.clip(out, lo, hi)


def _superlet_many(signals: np.ndarray, cfg: SuperletConfig) -> np.ndarray:
    orders = cfg.orders()
    cycles = [[i * cfg.base_cycles for i in range(1, o + 1)] for o in orders]
    bank = _WaveletBank(cfg, signals.shape[-1], cycles)
    sig_fft = sp_fft.fft(signals, bank.nfft, axis=-1)
    out = np.empty(signals.shape[:-1] + (len(cfg.freqs_hz), len(bank.cols)))
    for fi, o in enumerate(orders):
        stack = np.stack([bank.magnitudes(sig_fft, fi, ci) for ci in range(o)])
        out[..., fi, :] = geometric_mean(stack)
    return out


def scalogram(segment, cfg: SuperletConfig, cycles_per_freq: Sequence[float]) -> Spectrogram:
    segment = _check_signals(segment)
    if len(cycles_per_freq) != len(cfg.freqs_hz):
        raise ValidationError(
            f"scalogram: {len(cycles_per_freq)} cycle counts for {len(cfg.freqs_hz)} frequencies")
    values = _scalogram_many(segment[None, :], cfg, cycles_per_freq)[0]
    return Spectrogram(values, cfg.freqs_hz, cfg.decimation)


def superlet_transform(segment, cfg: SuperletConfig) -> Spectrogram:
    segment = _check_signals(segment)
    values = _superlet_many(segment[None, :], cfg)[0]
    return Spectrogram(values, cfg.freqs_hz, cfg.decimation)


def batch_transform(pairs, cfg: SuperletConfig, chunk: int = 32) -> np.ndarray:
    """Superlet magnitudes for a list of AlignedPair, shape (B, E, 1, F, T)."""
    if not pairs:
        raise ValidationError("batch_transform: no pairs")
    n_el, n_t = pairs[0].segment.shape
    rows = []
    for b, p in enumerate(pairs):
        if p.segment.shape != (n_el, n_t):
            raise ValidationError(
                f"batch_transform: pair {b} segment shape {p.segment.shape} != {(n_el, n_t)}")
        bad = np.argwhere(~np.isfinite(p.segment))
        if bad.size:
            raise ValidationError(
                f"batch_transform: pair {b} electrode {int(bad[0][0])}: non-finite samples")
        rows.append(np.asarray(p.segment, dtype=np.float64))
    signals = np.concatenate(rows, axis=0)  # (B*E, n_t)
    out = np.concatenate([_superlet_many(signals[i:i + chunk], cfg)
                          for i in range(0, len(signals), chunk)], axis=0)
    return out.reshape(len(pairs), n_el, 1, len(cfg.freqs_hz), -1)


def standardize(values: np.ndarray, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    """Z-score each spectrogram over its (F, T) plane."""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean(axis=(-2, -1), keepdims=True)
    sd = values.std(axis=(-2, -1), keepdims=True)
    return (values - mean) / (sd + eps)


# --------------------------------------------------------------------------
# SSEN container


def write_spectro_batch(path, values: np.ndarray, cfg: SuperletConfig) -> None:
    values = np.asarray(values)
    if values.ndim != 5:
        raise ValidationError(f"SpectroBatch must be 5-D (B,E,C,F,T), got {values.shape}")
    meta = cfg.to_dict()
    with Path(path).open("wb") as fh:
        w = Writer(fh)
        w.magic(SPECTRO_MAGIC, SPECTRO_VERSION)
        for d in values.shape:
            w.u32(d)
        w.f32_array(values)
        w.raw(bytes.fromhex(digest(meta)))
        w.text(canonical_json(meta).decode())


def read_spectro_batch(path) -> tuple[np.ndarray, SuperletConfig]:
    path = Path(path)
    r = Reader(path.read_bytes(), str(path))
    r.magic(SPECTRO_MAGIC, (SPECTRO_VERSION,))
    dims = tuple(r.u32() for _ in range(5))
    values = r.f32_array(dims)
    stored = r.raw(32).hex()
    meta = json.loads(r.text())
    r.done()
    if digest(meta) != stored:
        raise ValidationError(f"{path}: config digest does not match embedded config")
    return values, SuperletConfig(**meta)

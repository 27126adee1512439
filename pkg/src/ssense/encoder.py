"""Per-electrode convolutional encoder with mean pooling over electrodes.

Pipeline for one sample of shape (E, 1, F, T)::

    each electrode:  [conv -> relu -> avgpool] * n_stages -> global avg pool
                     -> (linear -> relu) if hidden -> linear to 512
    sample:          mean over electrodes -> L2 normalisation

Forward and backward are written out by hand in float64; ``forward`` returns a
cache that ``backward`` consumes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._binio import Reader, Writer, canonical_json, digest
from .errors import (DegenerateEmbeddingError, DigestMismatchError, NonFiniteActivationError,
                     ValidationError)

OUTPUT_DIM = 512
CHECKPOINT_MAGIC = b"SSWT"
CHECKPOINT_VERSION = 1
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class ConvStage:
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    pool: tuple[int, int] = (1, 1)

    def __post_init__(self):
        for name in ("kernel", "stride", "pool"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.out_channels < 1 or min(self.kernel + self.stride + self.pool) < 1:
            raise ValidationError(f"invalid conv stage {self}")


@dataclass(frozen=True)
class EncoderSpec:
    stages: tuple[ConvStage, ...]
    hidden: int = 0
    output_dim: int = OUTPUT_DIM
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, ConvStage) else ConvStage(**s) for s in self.stages))
        if self.output_dim != OUTPUT_DIM:
            raise ValidationError(f"output_dim must be {OUTPUT_DIM}, got {self.output_dim}")
        if not self.stages:
            raise ValidationError("encoder needs at least one conv stage")
        if self.hidden < 0:
            raise ValidationError("hidden width must be >= 0")

    @classmethod
    def default(cls, n_freqs: int, seed: int = 0) -> "EncoderSpec":
        """First stage spans the whole frequency axis.

        Global average pooling is translation invariant, so a 2-D kernel
        smaller than F would lose which frequency band carried the energy.
        """
        return cls(stages=(ConvStage(32, (n_freqs, 5), (1, 2), (1, 2)),
                           ConvStage(64, (1, 5), (1, 1), (1, 2))),
                   hidden=256, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(stages=tuple(ConvStage(**s) for s in d["stages"]), hidden=d["hidden"],
                   output_dim=d["output_dim"], seed=d["seed"])

    def digest(self) -> str:
        return digest(self.to_dict())

    def feature_shapes(self, input_shape: tuple[int, int]) -> list[tuple[int, int, int]]:
        """(channels, H, W) after each stage; raises if a kernel does not fit."""
        c, (h, w) = 1, input_shape
        shapes = []
        for i, st in enumerate(self.stages):
            kf, kt = st.kernel
            if kf > h or kt > w:
                raise ValidationError(
                    f"stage {i}: kernel {st.kernel} larger than its input ({h}, {w})")
            h = (h - kf) // st.stride[0] + 1
            w = (w - kt) // st.stride[1] + 1
            h, w = h // st.pool[0], w // st.pool[1]
            if h < 1 or w < 1:
                raise ValidationError(f"stage {i}: pooling {st.pool} leaves an empty feature map")
            c = st.out_channels
            shapes.append((c, h, w))
        return shapes

    def layout(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, fan_in) of every parameter tensor, in storage order."""
        out = []
        c_in = 1
        for i, st in enumerate(self.stages):
            fan_in = c_in * st.kernel[0] * st.kernel[1]
            out.append((f"conv{i}.weight", (st.out_channels, c_in) + st.kernel, fan_in))
            out.append((f"conv{i}.bias", (st.out_channels,), fan_in))
            c_in = st.out_channels
        if self.hidden:
            out.append(("hidden.weight", (self.hidden, c_in), c_in))
            out.append(("hidden.bias", (self.hidden,), c_in))
            c_in = self.hidden
        out.append(("proj.weight", (self.output_dim, c_in), c_in))
        out.append(("proj.bias", (self.output_dim,), c_in))
        return out

    def n_params(self) -> int:
        return sum(math.prod(shape) for _, shape, _ in self.layout())


class Parameters:
    """Flat float64 vector with named reshaped views into it."""

    def __init__(self, spec: EncoderSpec, flat: np.ndarray | None = None):
        self.spec = spec
        self._slices = {}
        offset = 0
        for name, shape, _ in spec.layout():
            size = math.prod(shape)
            self._slices[name] = (slice(offset, offset + size), shape)
            offset += size
        if flat is None:
            flat = np.zeros(offset)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (offset,):
            raise ValidationError(f"parameter vector has {flat.size} entries, spec needs {offset}")
        self.flat = flat

    @classmethod
    def init(cls, spec: EncoderSpec, seed: int | None = None) -> "Parameters":
        rng = np.random.default_rng(spec.seed if seed is None else seed)
        p = cls(spec)
        for name, shape, fan_in in spec.layout():
            if name.endswith(".weight"):
                gain = 3.0 if name == "proj.weight" else 6.0  # no ReLU after the projection
                bound = math.sqrt(gain / fan_in)
            else:
                bound = 1.0 / math.sqrt(fan_in)
            p[name][...] = rng.uniform(-bound, bound, size=shape)
        return p

    def __getitem__(self, name) -> np.ndarray:
        sl, shape = self._slices[name]
        return self.flat[sl].reshape(shape)

    def names(self):
        return list(self._slices)

    def block(self, name) -> slice:
        return self._slices[name][0]

    def copy(self) -> "Parameters":
        return Parameters(self.spec, self.flat.copy())

    def __len__(self):
        return self.flat.size


# --------------------------------------------------------------------------
# layer kernels


def _conv_forward(x, w, b, stride):
    n, c_in, _, _ = x.shape
    c_out, _, kf, kt = w.shape
    win = sliding_window_view(x, (kf, kt), axis=(2, 3))[:, :, ::stride[0], ::stride[1]]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, -1)
    out = cols @ w.reshape(c_out, -1).T + b
    return out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, x_shape, w, stride, need_dx):
    n, c_in, h, wd = x_shape
    c_out, _, kf, kt = w.shape
    _, _, ho, wo = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(c_out, -1)).reshape(n, ho, wo, c_in, kf, kt)
    dx = np.zeros(x_shape)
    sf, st = stride
    for i in range(kf):
        for j in range(kt):
            dx[:, :, i:i + sf * (ho - 1) + 1:sf, j:j + st * (wo - 1) + 1:st] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(x, pool):
    pf, pt = pool
    if pf == 1 and pt == 1:
        return x
    n, c, h, w = x.shape
    ho, wo = h // pf, w // pt
    return x[:, :, :ho * pf, :wo * pt].reshape(n, c, ho, pf, wo, pt).mean(axis=(3, 5))


def _pool_backward(dout, x_shape, pool):
    pf, pt = pool
    if pf == 1 and pt == 1:
        return dout
    n, c, ho, wo = dout.shape
    dx = np.zeros(x_shape)
    spread = np.repeat(np.repeat(dout, pf, axis=2), pt, axis=3) / (pf * pt)
    dx[:, :, :ho * pf, :wo * pt] = spread
    return dx


def _check_finite(a, layer):
    if not np.all(np.isfinite(a)):
        raise NonFiniteActivationError(layer)


def _sorted_mean(v, axis):
    # summing in sorted order makes the pool independent of electrode order
    return np.sort(v, axis=axis).sum(axis=axis) / v.shape[axis]


# --------------------------------------------------------------------------
# forward / backward


class Encoder:
    def __init__(self, spec: EncoderSpec, params: Parameters | None = None):
        self.spec = spec
        self.params = params if params is not None else Parameters.init(spec)
        if self.params.spec != spec:
            raise ValidationError("parameters were built for a different EncoderSpec")

    # per-electrode trunk on (N, 1, F, T)
    def _trunk(self, x):
        # overflow surfaces as NonFiniteActivationError, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            return self._trunk_unchecked(x)

    def _trunk_unchecked(self, x):
        p = self.params
        acts = []
        h = x
        for i, st in enumerate(self.spec.stages):
            conv, cols = _conv_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], st.stride)
            _check_finite(conv, f"conv{i}")
            relu = np.maximum(conv, 0.0)
            pooled = _pool_forward(relu, st.pool)
            acts.append({"in_shape": h.shape, "cols": cols, "conv": conv, "relu_shape": relu.shape})
            h = pooled
        gap = h.mean(axis=(2, 3))
        acts.append({"gap_shape": h.shape})
        feat = gap
        if self.spec.hidden:
            pre = feat @ p["hidden.weight"].T + p["hidden.bias"]
            _check_finite(pre, "hidden")
            acts.append({"hidden_in": feat, "hidden_pre": pre})
            feat = np.maximum(pre, 0.0)
        out = feat @ p["proj.weight"].T + p["proj.bias"]
        _check_finite(out, "proj")
        acts.append({"proj_in": feat})
        return out, acts

    def encode_electrode(self, spec2d: np.ndarray) -> np.ndarray:
        spec2d = np.asarray(spec2d, dtype=np.float64)
        if spec2d.ndim == 3:  # (C=1, F, T)
            spec2d = spec2d[0]
        if not np.all(np.isfinite(spec2d)):
            raise ValidationError("encode_electrode: non-finite spectrogram")
        out, _ = self._trunk(spec2d[None, None])
        return out[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        """Embed a (B, E, C, F, T) batch; returns unit-norm (B, 512) and a cache."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 5:
            raise ValidationError(f"expected (B, E, C, F, T), got {x.shape}")
        b, e, c, f, t = x.shape
        if c != 1:
            raise ValidationError(f"only single-channel spectrograms are supported (C={c})")
        if e < 1:
            raise ValidationError("need at least one electrode")
        self.spec.feature_shapes((f, t))
        out, acts = self._trunk(x.reshape(b * e, 1, f, t))
        per_el = out.reshape(b, e, -1)
        pooled = _sorted_mean(per_el, axis=1)
        norms = np.linalg.norm(pooled, axis=1)
        bad = np.flatnonzero(norms < DEGENERATE_NORM)
        if bad.size:
            raise DegenerateEmbeddingError(
                f"pooled embedding of sample {int(bad[0])} has norm {norms[bad[0]]:.3g}")
        z = pooled / norms[:, None]
        cache = {"acts": acts, "shape": x.shape, "pooled": pooled, "norms": norms, "z": z}
        return z, cache

    def encode_sample(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[:, None]
        z, _ = self.forward(x[None])
        return z[0]

    def embed(self, x: np.ndarray, chunk: int = 64) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + chunk])[0] for i in range(0, len(x), chunk)])

    def backward(self, cache: dict | None, grad_out: np.ndarray, through_norm: bool = True) -> np.ndarray:
        """Gradient of sum(grad_out * output) w.r.t. the flat parameter vector.

        With ``through_norm=False`` the upstream gradient is taken to be with
        respect to the pooled vector before L2 normalisation.
        """
        if cache is None:
            raise ValidationError("backward called without a forward cache")
        p = self.params
        grads = Parameters(self.spec)
        g = np.asarray(grad_out, dtype=np.float64)
        if through_norm:
            z = cache["z"]
            g = (g - z * np.sum(z * g, axis=1, keepdims=True)) / cache["norms"][:, None]
        b, e, _, _, _ = cache["shape"]
        d_out = np.repeat(g[:, None, :] / e, e, axis=1).reshape(b * e, -1)

        acts = cache["acts"]
        proj = acts[-1]
        grads["proj.weight"][...] = d_out.T @ proj["proj_in"]
        grads["proj.bias"][...] = d_out.sum(axis=0)
        d_feat = d_out @ p["proj.weight"]
        k = len(acts) - 2
        if self.spec.hidden:
            hid = acts[k]
            d_pre = d_feat * (hid["hidden_pre"] > 0)
            grads["hidden.weight"][...] = d_pre.T @ hid["hidden_in"]
            grads["hidden.bias"][...] = d_pre.sum(axis=0)
            d_feat = d_pre @ p["hidden.weight"]
            k -= 1
        n, c, h, w = acts[k]["gap_shape"]
        dh = np.broadcast_to(d_feat[:, :, None, None] / (h * w), (n, c, h, w))
        for i in range(len(self.spec.stages) - 1, -1, -1):
            st, a = self.spec.stages[i], acts[i]
            d_relu = _pool_backward(dh, a["relu_shape"], st.pool)
            d_conv = d_relu * (a["conv"] > 0)
            dh, dw, db = _conv_backward(d_conv, a["cols"], a["in_shape"], p[f"conv{i}.weight"],
                                        st.stride, need_dx=i > 0)
            grads[f"conv{i}.weight"][...] = dw
            grads[f"conv{i}.bias"][...] = db
        return grads.flat


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: Parameters, extra: dict | None = None) -> None:
    spec = params.spec
    meta = {"spec": spec.to_dict(), "extra": extra or {}}
    with Path(path).open("wb") as fh:
        w = Writer(fh)
        w.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        w.raw(bytes.fromhex(spec.digest()))
        w.text(canonical_json(meta).decode())
        w.u64(len(params))
        w.f32_array(params.flat)


def load_checkpoint(path, expected_spec: EncoderSpec | None = None) -> tuple[Parameters, dict]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    r = Reader(path.read_bytes(), str(path))
    r.magic(CHECKPOINT_MAGIC, (CHECKPOINT_VERSION,))
    stored = r.raw(32).hex()
    meta = json.loads(r.text())
    spec = EncoderSpec.from_dict(meta["spec"])
    if spec.digest() != stored:
        raise DigestMismatchError(f"{path}: embedded spec does not match its digest")
    if expected_spec is not None and expected_spec.digest() != stored:
        raise DigestMismatchError(
            f"{path}: checkpoint spec digest {stored[:12]} != expected {expected_spec.digest()[:12]}")
    count = r.u64()
    flat = r.f32_array((count,)).astype(np.float64)
    r.done()
    return Parameters(spec, flat), meta.get("extra", {})

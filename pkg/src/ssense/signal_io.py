"""Recording / transcript ingestion, sentence windowing and data splits."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import Reader, Writer
from .errors import DimensionMismatchError, NonFiniteError, ValidationError, WindowError

DEFAULT_SAMPLE_RATE_HZ = 2048.0
TARGET_LEN = 8200
MAX_SENTENCE_S = 4.0
PRE_CONTEXT_S = 0.5
POST_CONTEXT_S = 1.0

PAIR_MAGIC = b"SSPR"
PAIR_VERSION = 1


@dataclass
class RawRecording:
    electrodes: list[str]
    sample_rate_hz: float
    samples: np.ndarray  # (E, L) float32
    subject_id: str = "unknown"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise ValidationError(f"samples must be 2-D (E, L), got shape {self.samples.shape}")
        n_el, n_samp = self.samples.shape
        if n_el < 1 or n_samp < 1:
            raise ValidationError("recording needs at least one electrode and one sample")
        if len(self.electrodes) != n_el:
            raise DimensionMismatchError(
                f"{len(self.electrodes)} electrode labels for {n_el} signal rows")
        if len(set(self.electrodes)) != n_el:
            raise ValidationError("electrode labels must be unique")
        if not self.sample_rate_hz > 0:
            raise ValidationError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz


@dataclass(frozen=True)
class TranscriptSentence:
    text: str
    onset_s: float
    offset_s: float
    index: int

    def __post_init__(self):
        if not self.text:
            raise ValidationError(f"sentence {self.index}: empty text")
        if not (self.offset_s > self.onset_s >= 0):
            raise ValidationError(
                f"sentence {self.index}: need offset > onset >= 0, got "
                f"onset={self.onset_s} offset={self.offset_s}")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass
class AlignedPair:
    sentence: TranscriptSentence
    segment: np.ndarray  # (E, TARGET_LEN) float32
    valid_len: int
    pad_applied: bool


@dataclass
class SplitAssignment:
    seed: int
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)

    @property
    def sizes(self):
        return len(self.train), len(self.val), len(self.test)


def round_half_away(x: float) -> int:
    """Round to nearest integer, ties away from zero (``round`` is banker's)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


# --------------------------------------------------------------------------
# recordings


def load_recording(manifest_path) -> RawRecording:
    """Load a recording described by a JSON manifest plus an f32le blob.

    The blob is electrode-major: all samples of electrode 0, then electrode 1...
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ValidationError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest_path}: invalid JSON ({exc})") from exc

    required = ("subject_id", "sample_rate_hz", "electrodes", "n_samples", "signal_file",
                "dtype", "layout")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise ValidationError(f"{manifest_path}: missing keys {missing}")
    if manifest["dtype"] != "f32le":
        raise ValidationError(f"{manifest_path}: dtype must be 'f32le', got {manifest['dtype']!r}")
    if manifest["layout"] != "electrode_major":
        raise ValidationError(
            f"{manifest_path}: layout must be 'electrode_major', got {manifest['layout']!r}")

    blob_path = manifest_path.parent / manifest["signal_file"]
    if not blob_path.is_file():
        raise ValidationError(f"signal blob not found: {blob_path}")
    n_el = len(manifest["electrodes"])
    n_samp = int(manifest["n_samples"])
    raw = blob_path.read_bytes()
    expected = n_el * n_samp * 4
    if len(raw) != expected:
        raise DimensionMismatchError(
            f"{blob_path}: {len(raw)} bytes, manifest declares E={n_el} x L={n_samp} "
            f"float32 = {expected} bytes")
    samples = np.frombuffer(raw, dtype="<f4").reshape(n_el, n_samp).astype(np.float32)
    bad = np.argwhere(~np.isfinite(samples))
    if bad.size:
        e, t = (int(v) for v in bad[0])
        raise NonFiniteError(
            f"{blob_path}: non-finite sample at (electrode={e}, sample={t}); "
            f"{len(bad)} bad values in total", index=(e, t))
    return RawRecording(electrodes=list(manifest["electrodes"]),
                        sample_rate_hz=float(manifest["sample_rate_hz"]),
                        samples=samples, subject_id=str(manifest["subject_id"]))


def save_recording(rec: RawRecording, manifest_path, signal_file: str | None = None) -> Path:
    manifest_path = Path(manifest_path)
    signal_file = signal_file or manifest_path.with_suffix(".f32").name
    manifest = {
        "subject_id": rec.subject_id,
        "sample_rate_hz": rec.sample_rate_hz,
        "electrodes": list(rec.electrodes),
        "n_samples": rec.n_samples,
        "signal_file": signal_file,
        "dtype": "f32le",
        "layout": "electrode_major",
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    (manifest_path.parent / signal_file).write_bytes(
        np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


# --------------------------------------------------------------------------
# transcripts


def read_transcript(path) -> list[TranscriptSentence]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"transcript not found: {path}")
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"index", "text", "onset_s", "offset_s"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must contain {sorted(need)}")
        for row in reader:
            try:
                out.append(TranscriptSentence(text=row["text"], onset_s=float(row["onset_s"]),
                                              offset_s=float(row["offset_s"]),
                                              index=int(row["index"])))
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{reader.line_num}: {exc}") from exc
    return out


def write_transcript(sentences: Sequence[TranscriptSentence], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "text", "onset_s", "offset_s"])
        for s in sentences:
            writer.writerow([s.index, s.text, repr(s.onset_s), repr(s.offset_s)])


def filter_sentences(transcript: Sequence[TranscriptSentence],
                     max_dur_s: float = MAX_SENTENCE_S) -> list[TranscriptSentence]:
    # strict: a sentence of exactly max_dur_s is dropped
    return [s for s in transcript if s.duration_s < max_dur_s]


# --------------------------------------------------------------------------
# windows


def window_bounds(sample_rate_hz: float, s: TranscriptSentence, pre_s: float = PRE_CONTEXT_S,
                  post_s: float = POST_CONTEXT_S) -> tuple[int, int]:
    """(start sample, valid length) of the context-extended window."""
    start = round_half_away((s.onset_s - pre_s) * sample_rate_hz)
    valid_len = round_half_away((pre_s + s.duration_s + post_s) * sample_rate_hz)
    return start, valid_len


def extract_window(rec: RawRecording, s: TranscriptSentence, pre_s: float = PRE_CONTEXT_S,
                   post_s: float = POST_CONTEXT_S, target_len: int = TARGET_LEN) -> AlignedPair:
    if s.onset_s - pre_s < 0 or s.offset_s + post_s > rec.duration_s:
        raise WindowError(
            f"sentence {s.index}: window [{s.onset_s - pre_s:.4f}, {s.offset_s + post_s:.4f}] s "
            f"exceeds recording [0, {rec.duration_s:.4f}] s")
    start, valid_len = window_bounds(rec.sample_rate_hz, s, pre_s, post_s)
    if valid_len > target_len:
        raise WindowError(
            f"sentence {s.index}: window of {valid_len} samples longer than target {target_len}")
    if start + valid_len > rec.n_samples:
        raise WindowError(f"sentence {s.index}: rounded window ends past the last sample")
    segment = np.zeros((rec.samples.shape[0], target_len), dtype=np.float32)
    segment[:, :valid_len] = rec.samples[:, start:start + valid_len]
    return AlignedPair(sentence=s, segment=segment, valid_len=valid_len,
                       pad_applied=valid_len < target_len)


# --------------------------------------------------------------------------
# splits


def split_sizes(n: int) -> tuple[int, int, int]:
    # integer arithmetic: floor(0.6 n) and floor(0.2 n) without float rounding
    n_train = n * 6 // 10
    n_val = n * 2 // 10
    return n_train, n_val, n - n_train - n_val


def make_split(n: int, seed: int) -> SplitAssignment:
    if n < 3:
        raise ValidationError(f"need at least 3 pairs to split, got {n}")
    n_train, n_val, _ = split_sizes(n)
    perm = np.random.default_rng(seed).permutation(n)
    return SplitAssignment(
        seed=seed,
        train=sorted(int(i) for i in perm[:n_train]),
        val=sorted(int(i) for i in perm[n_train:n_train + n_val]),
        test=sorted(int(i) for i in perm[n_train + n_val:]),
    )


# --------------------------------------------------------------------------
# pair archive


def write_pair_archive(pairs: Sequence[AlignedPair], path, config_digest: str = "") -> None:
    """SSPR container: header, then one record per pair, then config digest."""
    n_el = pairs[0].segment.shape[0] if pairs else 0
    t0 = pairs[0].segment.shape[1] if pairs else TARGET_LEN
    with Path(path).open("wb") as fh:
        w = Writer(fh)
        w.magic(PAIR_MAGIC, PAIR_VERSION)
        w.u32(len(pairs))
        w.u32(n_el)
        w.u32(t0)
        for p in pairs:
            if p.segment.shape != (n_el, t0):
                raise DimensionMismatchError(
                    f"pair {p.sentence.index}: segment shape {p.segment.shape} != {(n_el, t0)}")
            w.u32(p.sentence.index)
            w.f64(p.sentence.onset_s)
            w.f64(p.sentence.offset_s)
            w.text(p.sentence.text)
            w.u32(p.valid_len)
            w.u8(1 if p.pad_applied else 0)
            w.f32_array(p.segment)
        w.text(config_digest)


def read_pair_archive(path) -> tuple[list[AlignedPair], str]:
    path = Path(path)
    r = Reader(path.read_bytes(), str(path))
    r.magic(PAIR_MAGIC, (PAIR_VERSION,))
    count, n_el, t0 = r.u32(), r.u32(), r.u32()
    pairs = []
    for _ in range(count):
        index = r.u32()
        onset, offset = r.f64(), r.f64()
        text = r.text()
        valid_len = r.u32()
        pad = bool(r.u8())
        seg = r.f32_array((n_el, t0))
        pairs.append(AlignedPair(TranscriptSentence(text, onset, offset, index), seg,
                                 valid_len, pad))
    cfg = r.text()
    r.done()
    return pairs, cfg

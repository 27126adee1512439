"""InfoNCE training with Adam, early stopping on validation Recall@10, and the
multi-seed split protocol."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .augment import MaskConfig, apply_masks
from .encoder import Encoder, EncoderSpec, Parameters
from .errors import ValidationError
from .evaluation import RetrievalReport, aggregate, make_report, rank_queries, recall_at_k
from .signal_io import SplitAssignment, make_split

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.07
    learning_rate: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    symmetric: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_pool: str = "val"  # "val" or "train+val"; test sentences are never candidates
    mask: MaskConfig = field(default_factory=MaskConfig)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValidationError("train.temperature must be > 0")
        if not self.learning_rate > 0:
            raise ValidationError("train.learning_rate must be > 0")
        if self.patience < 1:
            raise ValidationError("train.patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("train.batch_size and train.max_epochs must be >= 1")
        if self.val_pool not in ("val", "train+val"):
            raise ValidationError(f"train.val_pool must be 'val' or 'train+val', got {self.val_pool!r}")
        if isinstance(self.mask, dict):
            object.__setattr__(self, "mask", MaskConfig(**self.mask))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_recall_at_10: float
    elapsed_s: float


@dataclass
class TrainState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    best_val: float = float("-inf")
    epochs_since_improvement: int = 0
    log: list[EpochRecord] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: np.ndarray) -> "TrainState":
        return cls(params=params, m=np.zeros_like(params), v=np.zeros_like(params))


# --------------------------------------------------------------------------
# loss and optimiser


def info_nce(z_seeg: np.ndarray, z_text: np.ndarray, tau: float = 0.07,
             symmetric: bool = False) -> tuple[float, np.ndarray]:
    """Mean InfoNCE over the batch and its gradient w.r.t. ``z_seeg``.

    Row i is a softmax over cosine(z_seeg[i], z_text[j]) / tau with the
    diagonal as the positive. The text side is frozen and gets no gradient.
    With ``symmetric=True`` the text->signal direction (column softmax) is
    averaged in.
    """
    a = np.asarray(z_seeg, dtype=np.float64)
    b = np.asarray(z_text, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape or a.shape[0] < 1:
        raise ValidationError(f"info_nce: need matching (N, D) inputs, got {a.shape} / {b.shape}")
    n = a.shape[0]
    a_norm = np.linalg.norm(a, axis=1, keepdims=True)
    an = a / a_norm
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    logits = an @ bn.T / tau
    if not np.all(np.isfinite(logits)):
        raise ValidationError("info_nce: non-finite similarity")
    diag = np.diag(logits)

    lse_rows = logsumexp(logits, axis=1)
    loss = float(np.mean(lse_rows - diag))
    d_logits = np.exp(logits - lse_rows[:, None])
    d_logits[np.diag_indices(n)] -= 1.0
    d_logits /= n
    if symmetric:
        lse_cols = logsumexp(logits, axis=0)
        loss = 0.5 * (loss + float(np.mean(lse_cols - diag)))
        d_cols = np.exp(logits - lse_cols[None, :])
        d_cols[np.diag_indices(n)] -= 1.0
        d_logits = 0.5 * (d_logits + d_cols / n)

    d_an = d_logits @ bn / tau
    d_a = (d_an - an * np.sum(an * d_an, axis=1, keepdims=True)) / a_norm
    return loss, d_a


def adam_step(state: TrainState, grads: np.ndarray, lr: float = 5e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> TrainState:
    """Bias-corrected Adam update, in place on ``state``."""
    if grads.shape != state.params.shape:
        raise ValidationError(f"adam: gradient shape {grads.shape} != params {state.params.shape}")
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    state.params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly better metric."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = float("-inf")
        self.best_epoch = -1
        self.wait = 0

    def update(self, value: float, epoch: int) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
        else:
            self.wait += 1
        return self.wait >= self.patience


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: Parameters  # best-validation parameters
    state: TrainState
    best_epoch: int
    log: list[EpochRecord]


def recall_within(encoder: Encoder, x: np.ndarray, text: np.ndarray, k: int) -> float:
    """Recall@k using the given set as its own candidate pool."""
    z = encoder.embed(x)
    return recall_at_k(rank_queries(z, text, np.arange(len(z))), k)


def _append_metric_row(path, rec: EpochRecord):
    new = not Path(path).exists()
    with Path(path).open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "train_loss", "val_recall@10", "elapsed_s"])
        w.writerow([rec.epoch, f"{rec.train_loss:.6f}", f"{rec.val_recall_at_10:.4f}",
                    f"{rec.elapsed_s:.3f}"])


def train(spectra: np.ndarray, text: np.ndarray, split: SplitAssignment, cfg: TrainConfig,
          spec: EncoderSpec, metric_log=None,
          on_epoch: Callable[[int, Encoder, EpochRecord], bool] | None = None) -> TrainResult:
    """Train an encoder on ``split.train`` and select by ``split.val`` Recall@10.

    ``spectra`` is the standardised (n, E, 1, F, T) batch and ``text`` the
    matching frozen (n, 512) embeddings. ``on_epoch`` may return True to stop.
    """
    if len(spectra) != len(text):
        raise ValidationError(f"{len(spectra)} spectrograms but {len(text)} sentence embeddings")
    if not split.train or not split.val:
        raise ValidationError("empty train or validation split")
    text = np.asarray(text, dtype=np.float64)
    text_before = text.tobytes()

    encoder = Encoder(spec, Parameters.init(spec, seed=cfg.seed))
    state = TrainState.fresh(encoder.params.flat)
    stopper = EarlyStopping(cfg.patience)
    order_rng = np.random.default_rng([cfg.seed, 1])
    mask_rng = np.random.default_rng([cfg.mask.seed, cfg.seed, 2])
    train_idx = np.asarray(split.train)
    val_idx = np.asarray(split.val)
    pool_idx = val_idx if cfg.val_pool == "val" else np.asarray(sorted(split.train + split.val))
    best = encoder.params.copy()
    t0 = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        perm = train_idx[order_rng.permutation(len(train_idx))]
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = spectra[idx]
            if cfg.mask.enabled:
                x = apply_masks(x, cfg.mask, mask_rng)
            z, cache = encoder.forward(x)
            loss, d_z = info_nce(z, text[idx], cfg.temperature, cfg.symmetric)
            grads = encoder.backward(cache, d_z)
            adam_step(state, grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(loss * len(idx))
        val_r10 = evaluate(encoder.params, spectra, text, val_idx, pool_idx, ks=(10,)).recall_at[10]
        rec = EpochRecord(epoch, sum(losses) / len(perm), val_r10, time.perf_counter() - t0)
        state.log.append(rec)
        if metric_log is not None:
            _append_metric_row(metric_log, rec)
        log.info("epoch %d loss %.4f val R@10 %.2f", epoch, rec.train_loss, val_r10)

        stop = stopper.update(val_r10, epoch)
        if stopper.best_epoch == epoch:
            best = encoder.params.copy()
        state.best_val = stopper.best
        state.epochs_since_improvement = stopper.wait
        if on_epoch is not None and on_epoch(epoch, encoder, rec):
            break
        if stop:
            break

    assert text.tobytes() == text_before, "text embeddings must stay frozen"
    return TrainResult(params=best, state=state, best_epoch=stopper.best_epoch, log=state.log)


def evaluate(params: Parameters, spectra: np.ndarray, text: np.ndarray, query_idx: Sequence[int],
             candidate_idx: Sequence[int], ks=(1, 10, 50), **provenance) -> RetrievalReport:
    """Rank each query's own sentence among ``candidate_idx`` sentence embeddings."""
    query_idx = list(query_idx)
    candidate_idx = list(candidate_idx)
    pos = {c: i for i, c in enumerate(candidate_idx)}
    missing = [q for q in query_idx if q not in pos]
    if missing:
        raise ValidationError(f"query {missing[0]} has no candidate in the pool")
    z = Encoder(params.spec, params).embed(spectra[query_idx])
    ranks = rank_queries(z, text[candidate_idx], [pos[q] for q in query_idx])
    return make_report(ranks, len(candidate_idx), ks, **provenance)


@dataclass
class ProtocolRun:
    seed: int
    split: SplitAssignment
    result: TrainResult
    report: RetrievalReport


def run_protocol(spectra: np.ndarray, text: np.ndarray, cfg: TrainConfig, spec: EncoderSpec,
                 seeds: Sequence[int], ks=(1, 10, 50), candidate_pool: str = "test",
                 config_digest: str = "", source_tag: str = "",
                 on_run: Callable[[ProtocolRun], None] | None = None) -> tuple[list[ProtocolRun], dict]:
    """Fresh split + fresh init + train + test evaluation for every seed."""
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise ValidationError(f"protocol seeds must be distinct, got {seeds}")
    if candidate_pool not in ("test", "all"):
        raise ValidationError(f"candidate_pool must be 'test' or 'all', got {candidate_pool!r}")
    runs = []
    for seed in seeds:
        split = make_split(len(spectra), seed)
        assert not set(split.test) & (set(split.train) | set(split.val))
        run_cfg = replace(cfg, seed=seed)
        run_spec = replace(spec, seed=seed)
        result = train(spectra, text, split, run_cfg, run_spec)
        pool = split.test if candidate_pool == "test" else list(range(len(spectra)))
        report = evaluate(result.params, spectra, text, split.test, pool, ks, seed=seed,
                          config_digest=config_digest, source_tag=source_tag)
        run = ProtocolRun(seed, split, result, report)
        if on_run is not None:
            on_run(run)
        runs.append(run)
    return runs, aggregate([r.report for r in runs])

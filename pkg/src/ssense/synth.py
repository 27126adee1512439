"""Synthetic recording / transcript / embedding triples for end-to-end checks.

Sentence ``j`` belongs to cluster ``c = j % n_clusters`` and variant
``s = j // n_clusters``. During the sentence every electrode carries two
tones, one from the cluster frequency set and one from the variant set, on
top of white noise. The sentence embedding is
``normalize(cluster_dir[c] + variant_weight * variant_dir[s] + jitter)``, so
tone frequencies predict embedding geometry.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .embeddings import EMBED_DIM, SentenceEmbeddingSet, save_embeddings
from .signal_io import RawRecording, TranscriptSentence, save_recording, write_transcript


@dataclass(frozen=True)
class SynthConfig:
    n_sentences: int = 64
    n_clusters: int = 8
    n_electrodes: int = 4
    sample_rate_hz: float = 2048.0
    min_dur_s: float = 0.8
    max_dur_s: float = 2.4
    gap_s: float = 2.0
    noise_sd: float = 0.5
    variant_weight: float = 0.6
    jitter: float = 0.05
    seed: int = 0
    long_sentences: int = 0  # extra sentences lasting 5 s, dropped by the filter


def tone_sets(n_clusters: int, n_variants: int) -> tuple[np.ndarray, np.ndarray]:
    """Interleaved log-spaced frequencies: even slots for clusters, odd for variants."""
    n = 2 * max(n_clusters, n_variants)
    grid = np.geomspace(6.0, 160.0, n)
    return grid[0::2][:n_clusters], grid[1::2][:n_variants]


def synth_superlet_section() -> dict:
    """Superlet settings sized for the synthetic tones (kept cheap to train on)."""
    return {"freqs_hz": [round(float(f), 6) for f in np.geomspace(4.0, 200.0, 24)],
            "base_cycles": 3.0, "order_min": 1, "order_max": 4, "decimation": 64}


def generate(cfg: SynthConfig):
    rng = np.random.default_rng(cfg.seed)
    n_variants = -(-cfg.n_sentences // cfg.n_clusters)
    f_cluster, f_variant = tone_sets(cfg.n_clusters, n_variants)
    sr = cfg.sample_rate_hz

    durations = rng.uniform(cfg.min_dur_s, cfg.max_dur_s, cfg.n_sentences).tolist()
    durations += [5.0] * cfg.long_sentences
    order = rng.permutation(len(durations))  # interleave long sentences
    onsets, t = [], cfg.gap_s
    for i in order:
        onsets.append((i, t))
        t += durations[i] + cfg.gap_s
    total = int(np.ceil(t * sr))

    samples = rng.normal(0.0, cfg.noise_sd, size=(cfg.n_electrodes, total))
    gains = rng.uniform(0.5, 1.5, size=(cfg.n_electrodes, 2))
    sentences = []
    for i, onset in onsets:
        dur = durations[i]
        a, b = int(round(onset * sr)), int(round((onset + dur) * sr))
        tt = np.arange(b - a) / sr
        if i < cfg.n_sentences:
            c, s = i % cfg.n_clusters, i // cfg.n_clusters
            phase = rng.uniform(0, 2 * np.pi, size=2)
            tone_c = np.sin(2 * np.pi * f_cluster[c] * tt + phase[0])
            tone_s = np.sin(2 * np.pi * f_variant[s] * tt + phase[1])
            samples[:, a:b] += gains[:, :1] * tone_c + gains[:, 1:] * tone_s
            text = f"synthetic sentence {i} (cluster {c}, variant {s})"
        else:
            text = f"long synthetic sentence {i}"
        sentences.append(TranscriptSentence(text, round(onset, 6), round(onset + dur, 6), i))
    sentences.sort(key=lambda s: s.onset_s)

    cluster_dirs = rng.normal(size=(cfg.n_clusters, EMBED_DIM))
    variant_dirs = rng.normal(size=(n_variants, EMBED_DIM))
    cluster_dirs /= np.linalg.norm(cluster_dirs, axis=1, keepdims=True)
    variant_dirs /= np.linalg.norm(variant_dirs, axis=1, keepdims=True)
    texts, vecs = [], []
    for s in sorted(sentences, key=lambda s: s.index):
        i = s.index
        if i < cfg.n_sentences:
            v = (cluster_dirs[i % cfg.n_clusters]
                 + cfg.variant_weight * variant_dirs[i // cfg.n_clusters])
        else:
            v = rng.normal(size=EMBED_DIM)
        v = v + cfg.jitter * rng.normal(size=EMBED_DIM)
        texts.append(s.text)
        vecs.append(v)

    rec = RawRecording(electrodes=[f"E{e:02d}" for e in range(cfg.n_electrodes)],
                       sample_rate_hz=sr, samples=samples.astype(np.float32),
                       subject_id=f"synthetic-{cfg.seed}")
    emb = SentenceEmbeddingSet(texts, np.asarray(vecs), source_tag=f"synthetic:seed={cfg.seed}")
    return rec, sentences, emb


def write_synth(outdir, cfg: SynthConfig = SynthConfig()) -> dict[str, Path]:
    """Write manifest, blob, transcript, embeddings and a ready-to-run config."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rec, sentences, emb = generate(cfg)
    paths = {
        "manifest": save_recording(rec, outdir / "recording.json", "recording.f32"),
        "transcript": outdir / "transcript.csv",
        "embeddings": outdir / "embeddings.sstx",
        "config": outdir / "config.yaml",
    }
    write_transcript(sentences, paths["transcript"])
    save_embeddings(emb, paths["embeddings"])
    config = {
        "paths": {"manifest": "recording.json", "transcript": "transcript.csv",
                  "embeddings": "embeddings.sstx", "workdir": "work"},
        "superlet": synth_superlet_section(),
        "augment": {"r_f": 0.0, "r_t": 0.0, "r_e": 0.0, "seed": 0},
        "encoder": {"stages": [{"out_channels": 64, "kernel": ["F", 3]}], "hidden": 256},
        # 12 validation queries give a coarse Recall@10, hence the longer patience
        "train": {"batch_size": 16, "max_epochs": 200, "patience": 30, "val_pool": "train+val"},
        "eval": {"ks": [1, 8, 10, 50], "candidate_pool": "all"},
    }
    paths["config"].write_text(yaml.safe_dump(config, sort_keys=False))
    return paths

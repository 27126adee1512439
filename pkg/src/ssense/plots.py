"""Optional figures for ``ssense report --plots`` (needs matplotlib)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import SsenseError


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise SsenseError("--plots needs matplotlib (pip install 'artifact[plots]')") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def rank_histogram(ranks, n_candidates: int, path) -> Path:
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(np.asarray(ranks), bins=np.arange(1, n_candidates + 2) - 0.5, color="tab:blue")
    ax.axhline(len(ranks) / n_candidates, color="grey", ls="--", label="uniform")
    ax.set_xlabel("rank of true sentence")
    ax.set_ylabel("queries")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def recall_curve(ranks, n_candidates: int, path) -> Path:
    plt = _pyplot()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ranks = np.asarray(ranks)
    k = np.arange(1, n_candidates + 1)
    recall = 100.0 * (ranks[None, :] <= k[:, None]).mean(axis=1)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(k, recall, label="model")
    ax.plot(k, 100.0 * k / n_candidates, "--", color="grey", label="random")
    ax.set_xlabel("k")
    ax.set_ylabel("Recall@k (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

"""Retrieval scoring, random baselines and Student-t significance tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_KS = (1, 10, 50)


@dataclass
class RetrievalReport:
    n_candidates: int
    recall_at: dict[int, float]
    mrr: float
    ranks: list[int] = field(default_factory=list)
    seed: int | None = None
    config_digest: str = ""
    source_tag: str = ""

    def to_dict(self) -> dict:
        return {
            "n_candidates": self.n_candidates,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "mrr": self.mrr,
            "ranks": list(self.ranks),
            "seed": self.seed,
            "config_digest": self.config_digest,
            "source_tag": self.source_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalReport":
        return cls(n_candidates=d["n_candidates"],
                   recall_at={int(k): float(v) for k, v in d["recall_at"].items()},
                   mrr=float(d["mrr"]), ranks=list(d.get("ranks", [])), seed=d.get("seed"),
                   config_digest=d.get("config_digest", ""), source_tag=d.get("source_tag", ""))

    def metrics(self) -> dict[str, float]:
        out = {f"recall@{k}": v for k, v in sorted(self.recall_at.items())}
        out["mrr"] = self.mrr
        return out


def cosine_matrix(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    cn = c / np.linalg.norm(c, axis=1, keepdims=True)
    return qn @ cn.T


def rank_queries(q: np.ndarray, c: np.ndarray, truth: Sequence[int]) -> np.ndarray:
    """1-based rank of each query's true candidate by descending cosine.

    Ties go to the lower candidate index.
    """
    truth = np.asarray(truth, dtype=np.intp)
    n = len(c)
    if truth.shape != (len(q),):
        raise ValidationError(f"need one truth index per query ({len(q)}), got {truth.shape}")
    if truth.size and (truth.min() < 0 or truth.max() >= n):
        raise ValidationError(f"truth index out of range for {n} candidates")
    sims = cosine_matrix(q, c)
    true_sim = sims[np.arange(len(q)), truth][:, None]
    better = sims > true_sim
    tied_before = (sims == true_sim) & (np.arange(n)[None, :] < truth[:, None])
    return 1 + better.sum(axis=1) + tied_before.sum(axis=1)


def _check_ranks(ranks):
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValidationError("no ranks to score")
    if ranks.min() < 1:
        raise ValidationError("ranks are 1-based")
    return ranks


def recall_at_k(ranks, k: int) -> float:
    ranks = _check_ranks(ranks)
    return 100.0 * np.count_nonzero(ranks <= k) / ranks.size


def mrr(ranks) -> float:
    ranks = _check_ranks(ranks)
    return float(np.mean(1.0 / ranks))


def make_report(ranks, n_candidates: int, ks=DEFAULT_KS, **provenance) -> RetrievalReport:
    ranks = [int(r) for r in ranks]
    return RetrievalReport(n_candidates=n_candidates,
                           recall_at={int(k): recall_at_k(ranks, k) for k in ks},
                           mrr=mrr(ranks), ranks=ranks, **provenance)


def harmonic(n: int) -> float:
    return math.fsum(1.0 / r for r in range(1, n + 1))


def random_baseline(n: int, ks=DEFAULT_KS) -> RetrievalReport:
    """Expected metrics when the true candidate's rank is uniform on 1..n."""
    if n < 1:
        raise ValidationError("random baseline needs at least one candidate")
    return RetrievalReport(n_candidates=n,
                           recall_at={int(k): 100.0 * min(k, n) / n for k in ks},
                           mrr=harmonic(n) / n, source_tag="analytic-random")


def monte_carlo_baseline(n: int, trials: int = 100_000, seed: int = 0, ks=DEFAULT_KS,
                         chunk: int = 5000) -> tuple[dict, dict]:
    """Simulated random retrieval; returns (means, standard errors) per metric."""
    rng = np.random.default_rng(seed)
    ranks = []
    for start in range(0, trials, chunk):
        m = min(chunk, trials - start)
        scores = rng.random((m, n))
        ranks.append(1 + np.count_nonzero(scores[:, 1:] > scores[:, :1], axis=1))
    ranks = np.concatenate(ranks)
    samples = {f"recall@{k}": 100.0 * (ranks <= k) for k in ks}
    samples["mrr"] = 1.0 / ranks
    means = {k: float(v.mean()) for k, v in samples.items()}
    ses = {k: float(v.std(ddof=1) / math.sqrt(trials)) for k, v in samples.items()}
    return means, ses


# --------------------------------------------------------------------------
# Student t


def _betacf(a, b, x, max_iter=500, eps=1e-16):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc_reg(df / 2.0, 0.5, df / (df + t * t)))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - tail if t >= 0 else tail


@dataclass(frozen=True)
class StatResult:
    t: float
    df: int
    p: float
    kind: str  # "one-sample" | "paired"
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"t": None if math.isnan(self.t) else self.t, "df": self.df,
                "p": None if math.isnan(self.p) else self.p, "kind": self.kind,
                "degenerate": self.degenerate}


def one_sample_t(samples, mu0: float, kind: str = "one-sample") -> StatResult:
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValidationError("t-test needs at least two samples")
    sd = float(np.std(x, ddof=1))
    if sd == 0.0:
        return StatResult(float("nan"), n - 1, float("nan"), kind, degenerate=True)
    t = (float(np.mean(x)) - mu0) / (sd / math.sqrt(n))
    return StatResult(t, n - 1, t_sf_two_sided(t, n - 1), kind)


def paired_t(a, b) -> StatResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"paired t-test needs equal lengths, got {a.size} and {b.size}")
    return one_sample_t(a - b, 0.0, kind="paired")


# --------------------------------------------------------------------------
# aggregation / formatting


def aggregate(reports: Sequence[RetrievalReport]) -> dict[str, dict[str, float]]:
    """Mean and sample SD (n-1) of every metric across reports."""
    if not reports:
        raise ValidationError("nothing to aggregate")
    out = {}
    for key in reports[0].metrics():
        vals = np.array([r.metrics()[key] for r in reports])
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out[key] = {"mean": float(vals.mean()), "sd": sd, "values": vals.tolist()}
    return out


def fmt_metric(key: str, value: float) -> str:
    return f"{value:.4f}" if key == "mrr" else f"{value:.2f}"


def format_report(report: RetrievalReport) -> str:
    parts = [f"Recall@{k}={fmt_metric('recall', v)}" for k, v in sorted(report.recall_at.items())]
    parts.append(f"MRR={fmt_metric('mrr', report.mrr)}")
    return f"n_candidates={report.n_candidates} " + " ".join(parts)


def format_table(rows: dict[str, dict], baseline: RetrievalReport | None = None) -> str:
    """Table-1 style text: one line per method, mean +- SD per metric."""
    keys = None
    lines = []
    for name, agg in rows.items():
        keys = keys or list(agg)
        cells = [f"{fmt_metric(k, agg[k]['mean'])} ± {fmt_metric(k, agg[k]['sd'])}" for k in keys]
        lines.append([name] + cells)
    if baseline is not None:
        m = baseline.metrics()
        keys = keys or list(m)
        lines.append(["Random sentence retrieval"] + [fmt_metric(k, m[k]) for k in keys])
    header = ["Method"] + [k.replace("recall", "Recall").replace("mrr", "MRR") for k in keys]
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(header)] + [fmt(r) for r in lines]) + "\n"

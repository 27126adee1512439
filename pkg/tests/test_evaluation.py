import math
from itertools import product

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from ssense.errors import ValidationError
from ssense.evaluation import (RetrievalReport, betainc_reg, format_report, format_table,
                               make_report, monte_carlo_baseline, mrr, one_sample_t, paired_t,
                               random_baseline, rank_queries, recall_at_k, t_cdf,
                               t_sf_two_sided)

mpmath.mp.dps = 30


def t_tail_oracle(t, df):
    """Two-sided p by numerical integration of the Student-t density."""
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    pdf = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    return float(2 * mpmath.quad(pdf, [abs(t), abs(t) + 10, mpmath.inf]))


def brute_rank(q, c, truth):
    sims = [float(np.dot(q, x) / np.linalg.norm(q) / np.linalg.norm(x)) for x in c]
    order = sorted(range(len(c)), key=lambda j: (-sims[j], j))
    return order.index(truth) + 1


# ---- ranking

def test_self_retrieval_rank_one():
    c = np.random.default_rng(0).normal(size=(9, 512))
    assert rank_queries(c, c, np.arange(9)).tolist() == [1] * 9


def test_orthogonal_query_brute_force():
    rng = np.random.default_rng(1)
    for n in range(2, 11):
        c = rng.normal(size=(n, 16))
        c[0] = 0
        c[0, 0] = 1.0
        q = c[1:2].copy()
        q[0, 0] = 0.0  # orthogonal to candidate 0, the truth
        got = rank_queries(q, c, [0])[0]
        assert got == brute_rank(q[0], c, 0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 10), m=st.integers(1, 6))
def test_rank_matches_exhaustive_sort(seed, n, m):
    rng = np.random.default_rng(seed)
    # candidates drawn from a small pool, so exact duplicates (ties) happen
    pool = rng.normal(size=(3, 4))
    c = pool[rng.integers(0, 3, size=n)]
    q = rng.normal(size=(m, 4))
    truth = rng.integers(0, n, size=m)
    got = rank_queries(q, c, truth)
    assert got.tolist() == [brute_rank(q[i], c, truth[i]) for i in range(m)]


def test_identical_candidates_tie_break_by_index():
    c = np.tile(np.random.default_rng(0).normal(size=8), (6, 1))
    q = np.random.default_rng(1).normal(size=(6, 8))
    assert rank_queries(q, c, np.arange(6)).tolist() == [1, 2, 3, 4, 5, 6]


def test_rotation_invariance():
    rng = np.random.default_rng(4)
    q, c = rng.normal(size=(10, 32)), rng.normal(size=(20, 32))
    rot = ortho_group.rvs(32, random_state=5)
    truth = rng.integers(0, 20, size=10)
    assert np.array_equal(rank_queries(q, c, truth), rank_queries(q @ rot, c @ rot, truth))


def test_truth_out_of_range():
    with pytest.raises(ValidationError):
        rank_queries(np.ones((1, 3)), np.ones((2, 3)), [2])


# ---- metrics

def test_hand_arithmetic():
    ranks = [1, 2, 3, 4]
    assert recall_at_k(ranks, 1) == 25 and recall_at_k(ranks, 2) == 50
    assert abs(mrr(ranks) - (1 + 0.5 + 1 / 3 + 0.25) / 4) < 1e-15
    assert recall_at_k([1, 1], 1) == 100 and mrr([1, 1]) == 1
    assert recall_at_k([3, 7, 2], 7) == 100
    with pytest.raises(ValidationError):
        mrr([])
    with pytest.raises(ValidationError):
        recall_at_k([0, 1], 1)


@given(st.lists(st.integers(1, 50), min_size=1, max_size=40))
def test_report_invariants(ranks):
    rep = make_report(ranks, 50, ks=(1, 5, 10, 50))
    vals = [rep.recall_at[k] for k in (1, 5, 10, 50)]
    assert vals == sorted(vals) and vals[-1] == 100
    assert abs(rep.mrr - np.mean(1 / np.array(ranks))) < 1e-12
    assert RetrievalReport.from_dict(rep.to_dict()) == rep


def test_baseline_292():
    b = random_baseline(292)
    assert abs(b.recall_at[1] - 100 / 292) < 1e-12
    h = float(mpmath.harmonic(292))
    assert abs(b.mrr - h / 292) < 1e-15
    assert format_report(b) == ("n_candidates=292 Recall@1=0.34 Recall@10=3.42 Recall@50=17.12 "
                                "MRR=0.0214")


def test_baseline_one_candidate():
    b = random_baseline(1)
    assert b.recall_at[1] == 100 and b.mrr == 1
    assert random_baseline(5, ks=(10,)).recall_at[10] == 100


def test_monte_carlo_within_3_se():
    means, ses = monte_carlo_baseline(292, trials=100_000, seed=0)
    exact = random_baseline(292).metrics()
    for key, mean in means.items():
        assert abs(mean - exact[key]) < 3 * ses[key], key


# ---- t tests

def test_t_example_five():
    r = one_sample_t([1, 2, 3, 4, 5], 2)
    assert abs(r.t - 1.41421) < 1e-5 and r.df == 4
    assert abs(r.p - 0.2302) < 1e-3
    assert abs(r.p - t_tail_oracle(math.sqrt(2), 4)) < 1e-10


def test_t_centered_sample():
    r = one_sample_t([1, 2, 3], 2)
    assert r.t == 0 and r.p == 1


def test_paired_degenerate():
    a = [0.3, 0.5, 0.9]
    r = paired_t(a, a)
    assert r.degenerate and math.isnan(r.t) and r.kind == "paired"
    assert r.to_dict()["t"] is None
    with pytest.raises(ValidationError):
        paired_t([1, 2], [1, 2, 3])
    with pytest.raises(ValidationError):
        one_sample_t([1.0], 0)


def test_paired_equals_one_sample_on_differences():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=10), rng.normal(size=10)
    assert paired_t(a, b).t == one_sample_t(a - b, 0).t


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=12), st.floats(-50, 50))
def test_p_symmetric_under_negation(xs, mu):
    a, b = one_sample_t(xs, mu), one_sample_t([-x for x in xs], -mu)
    if a.degenerate:
        assert b.degenerate
    else:
        assert abs(a.p - b.p) < 1e-12 and 0 <= a.p <= 1


def test_t_grid_vs_integration_oracle():
    ts = [0.0, 0.1, 0.5, 1.0, 1.96, 2.5, 4.0, 8.0, 20.0]
    dfs = [1, 2, 3, 4, 5, 9, 10, 29, 100]
    worst = 0.0
    for t, df in product(ts, dfs):
        want = t_tail_oracle(t, df)
        worst = max(worst, abs(t_sf_two_sided(t, df) - want))
        cdf = 1 - want / 2
        assert abs(t_cdf(t, df) - cdf) < 1e-8
        assert abs(t_cdf(-t, df) - (1 - cdf)) < 1e-8
    assert worst < 1e-8


def test_betainc_vs_mpmath():
    for a, b, x in [(0.5, 0.5, 0.3), (2, 0.5, 0.9), (50, 0.5, 0.99), (1, 1, 0.42), (0.5, 7, 0.01)]:
        want = float(mpmath.betainc(a, b, 0, x, regularized=True))
        assert abs(betainc_reg(a, b, x) - want) < 1e-12
    assert betainc_reg(2, 3, 0.0) == 0 and betainc_reg(2, 3, 1.0) == 1


def test_format_table_layout():
    agg = {"recall@1": {"mean": 1.234, "sd": 0.5}, "mrr": {"mean": 0.02, "sd": 0.001}}
    text = format_table({"model": agg}, random_baseline(292, ks=(1,)))
    lines = text.splitlines()
    assert lines[0].split() == ["Method", "Recall@1", "MRR"]
    assert "1.23 ± 0.50" in lines[1] and "0.0200 ± 0.0010" in lines[1]
    assert lines[2].startswith("Random sentence retrieval") and "0.34" in lines[2]

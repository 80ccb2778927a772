import math
import random
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import average_ranks, brute_percentile, brute_rank_cv, brute_variance_partition
from reformkit.analytics import (
    ScoreGrid,
    delta_distribution,
    rank_cv,
    rank_cv_table,
    rank_matrix,
    rank_methods,
    read_score_grid,
    significance_stars,
    spearman,
    spearman_table,
    variance_partition,
    variance_table,
    write_delta_csv,
    write_rank_cv_csv,
    write_spearman_csv,
)
from reformkit.exceptions import ParseError, PreconditionError, ValidationError


def random_grid(n_methods=12, n_datasets=9, n_llms=3, seed=0):
    rng = random.Random(seed)
    grid = ScoreGrid()
    for m in range(n_methods):
        for d in range(n_datasets):
            for l in range(n_llms):
                grid.add(f"m{m:02d}", f"d{d}", f"llm{l}", "ndcg@10", round(rng.uniform(0.1, 0.8), 3))
    return grid


def test_rank_methods_examples():
    assert rank_methods({"A": 0.9, "B": 0.5, "C": 0.1}) == {"A": 1, "B": 2, "C": 3}
    assert rank_methods({"A": 0.5, "B": 0.5}) == {"A": 1.5, "B": 1.5}
    with pytest.raises(PreconditionError):
        rank_methods({"A": float("nan"), "B": 1.0})


def test_rank_methods_matches_oracle_with_ties():
    rng = random.Random(1)
    for _ in range(20):
        scores = {f"m{i}": rng.choice([0.1, 0.2, 0.3, 0.4, rng.random()]) for i in range(12)}
        ranks = rank_methods(scores)
        expected = average_ranks(list(scores.values()))
        assert list(ranks.values()) == expected
        assert math.fsum(ranks.values()) == 12 * 13 / 2


def test_rank_cv_examples():
    assert rank_cv([4, 4, 4]) == 0.0
    assert rank_cv([1, 2, 3]) == pytest.approx(50.0, abs=1e-12)
    assert rank_cv([1, 2, 3], ddof=0) == pytest.approx(100 * math.sqrt(2 / 3) / 2)
    with pytest.raises(PreconditionError):
        rank_cv([3])


def test_grid_rank_cv_median_matches_oracle():
    grid = random_grid()
    rows = rank_cv_table(grid, "ndcg@10")
    assert len(rows) == 12 * 3
    expected = []
    for llm in grid.llms:
        per_dataset = {d: average_ranks([grid.value(m, d, llm, "ndcg@10") for m in grid.methods]) for d in grid.datasets}
        for i, m in enumerate(grid.methods):
            expected.append(brute_rank_cv([per_dataset[d][i] for d in grid.datasets]))
    got = [r.rank_cv for r in rows]
    assert max(abs(a - b) for a, b in zip(got, expected)) <= 1e-9
    assert statistics.median(got) == pytest.approx(statistics.median(expected), abs=1e-9)


def test_rank_matrix_rows_sum_to_triangle():
    for ranks in rank_matrix(random_grid(seed=3), "ndcg@10").values():
        assert math.fsum(ranks.values()) == pytest.approx(12 * 13 / 2)


def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [1, 2, 3, 4]).rho == 1.0
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]).rho == -1.0
    assert spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]).rho == pytest.approx(1 - 6 * 4 / 120, abs=1e-12)
    with pytest.raises(PreconditionError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(PreconditionError):
        spearman([1, 2], [1, 2])
    with pytest.raises(PreconditionError):
        spearman({"a": 1, "b": 2, "c": 3}, {"a": 1, "b": 2, "d": 3})


def test_spearman_t_approx_p_value():
    res = spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
    t = 0.8 * math.sqrt(3 / (1 - 0.64))
    from scipy import stats

    assert res.p == pytest.approx(2 * stats.t.sf(t, 3), abs=1e-12)
    assert res.stars == "ns"
    assert significance_stars(0.009) == "**" and significance_stars(0.04) == "*"


@pytest.mark.parametrize("seed", range(5))
def test_permutation_agrees_with_t_approx(seed):
    rng = np.random.default_rng(seed)
    base = rng.permutation(12) + 1
    noisy = stats_rank(base + rng.normal(0, 3, 12))
    t = spearman(base, noisy)
    perm = spearman(base, noisy, method="permutation", n_permutations=100_000, seed=seed)
    assert perm.rho == t.rho
    assert abs(perm.p - t.p) <= 0.02


def stats_rank(x):
    return np.argsort(np.argsort(x)) + 1


def test_spearman_matches_scipy_with_ties():
    from scipy import stats

    a = [1, 2, 2, 4, 5, 6, 6, 8]
    b = [2, 1, 3, 3, 6, 5, 8, 7]
    assert spearman(a, b).rho == pytest.approx(stats.spearmanr(a, b).statistic, abs=1e-12)


def test_variance_partition_additive_and_constant():
    a = [0.1, 0.4, 0.2, 0.7]
    b = [0.0, 0.05, -0.03]
    additive = variance_partition([[ai + bj for bj in b] for ai in a])
    assert additive.pct_interaction_residual == pytest.approx(0, abs=1e-9)
    const_llm = variance_partition([[ai] * 3 for ai in a])
    assert const_llm.pct_llm == pytest.approx(0, abs=1e-9)
    flat = variance_partition([[1, 1], [1, 1]])
    assert flat.degenerate and flat.pct_llm == flat.pct_method == 0.0
    with pytest.raises(PreconditionError):
        variance_partition([[1, 2, 3]])
    with pytest.raises(PreconditionError):
        variance_partition([[1, float("nan")], [1, 2]])


@pytest.mark.parametrize("seed", range(5))
def test_variance_partition_matches_oracle(seed):
    rng = random.Random(seed)
    matrix = [[rng.uniform(0, 1) for _ in range(4)] for _ in range(12)]
    vp = variance_partition(matrix)
    llm, method, inter = brute_variance_partition(matrix)
    assert abs(vp.pct_llm - llm) <= 1e-9
    assert abs(vp.pct_method - method) <= 1e-9
    assert abs(vp.pct_interaction_residual - inter) <= 1e-9
    assert abs(vp.pct_llm + vp.pct_method + vp.pct_interaction_residual - 100) <= 1e-9


def test_delta_examples():
    same = delta_distribution({"a": 0.3, "b": 0.1}, {"a": 0.3, "b": 0.1})
    assert same.summary.median == 0 and all(d == 0 for _, d in same.points)
    shift = delta_distribution({q: 0.5 for q in "abcd"}, {q: 0.2 for q in "abcd"})
    assert shift.summary.median == pytest.approx(0.3) and shift.summary.iqr == pytest.approx(0, abs=1e-12)
    with pytest.raises(PreconditionError, match="'c'"):
        delta_distribution({"a": 1, "b": 1}, {"a": 1, "c": 1})


def test_delta_quartiles_match_oracle():
    rng = random.Random(11)
    base = {f"q{i}": rng.random() for i in range(37)}
    ref = {q: rng.random() for q in base}
    s = delta_distribution(ref, base).summary
    deltas = [ref[q] - base[q] for q in base]
    for got, q in ((s.q1, 0.25), (s.median, 0.5), (s.q3, 0.75)):
        assert got == pytest.approx(brute_percentile(deltas, q), abs=1e-12)
    assert (s.minimum, s.maximum) == (min(deltas), max(deltas))


def test_tables_and_exports(tmp_path):
    grid = random_grid(n_methods=5, n_datasets=3, n_llms=3, seed=2)
    rows = spearman_table(grid, "ndcg@10")
    assert [(r.llm_a, r.llm_b) for r in rows] == [("llm0", "llm1"), ("llm0", "llm2"), ("llm1", "llm2")]
    write_spearman_csv(rows, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "llm_a,llm_b,rho,p,stars,test"
    write_rank_cv_csv(rank_cv_table(grid, "ndcg@10"), grid.datasets, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().count("\n") == 1 + 15
    vp = variance_table(grid, "ndcg@10")
    assert vp.pct_llm + vp.pct_method + vp.pct_interaction_residual == pytest.approx(100)
    dist = delta_distribution({"a": 0.5, "b": 0.1}, {"a": 0.2, "b": 0.2}, {"dataset": "d0", "retriever": "bm25"})
    write_delta_csv([dist], tmp_path / "p.csv", tmp_path / "sum.csv")
    assert (tmp_path / "p.csv").read_text().splitlines() == [
        "dataset,retriever,query_id,delta", "d0,bm25,a,0.300000", "d0,bm25,b,-0.100000"]
    assert (tmp_path / "sum.csv").read_text().splitlines()[0].startswith("dataset,retriever,n,min,q1")


def test_incomplete_grid_rejected(tmp_path):
    grid = random_grid(n_methods=3, n_datasets=2, n_llms=2)
    grid.add("extra", "d0", "llm0", "ndcg@10", 0.5)
    with pytest.raises(ValidationError, match="missing"):
        rank_cv_table(grid, "ndcg@10")
    with pytest.raises(ValidationError):
        grid.add("extra", "d0", "llm0", "ndcg@10", 0.1)
    (tmp_path / "g.csv").write_text("method,dataset,llm\n")
    with pytest.raises(ParseError):
        read_score_grid(tmp_path / "g.csv")


def test_read_score_grid(tmp_path):
    (tmp_path / "g.csv").write_text("method,dataset,llm,metric,value\nA,d,l,ndcg@10,0.5\nB,d,l,ndcg@10,0.25\n")
    grid = read_score_grid(tmp_path / "g.csv")
    assert grid.methods == ["A", "B"] and grid.value("B", "d", "l", "ndcg@10") == 0.25


rank_lists = st.integers(3, 10).flatmap(
    lambda n: st.tuples(st.permutations(range(1, n + 1)), st.permutations(range(1, n + 1))))


@settings(max_examples=100, deadline=None)
@given(rank_lists)
def test_property_spearman_symmetric_and_bounded(pair):
    a, b = pair
    r1 = spearman(list(a), list(b)).rho
    assert -1 <= r1 <= 1
    assert r1 == pytest.approx(spearman(list(b), list(a)).rho, abs=1e-12)
    monotone = [math.exp(x) for x in a]
    assert spearman(monotone, list(b)).rho == pytest.approx(r1, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1, 12), min_size=2, max_size=9))
def test_property_rank_cv_nonnegative_zero_iff_constant(ranks):
    cv = rank_cv(ranks)
    assert cv >= 0
    assert (cv == 0) == (len(set(ranks)) == 1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=12), st.floats(0.1, 10), st.floats(-5, 5))
def test_property_ranking_affine_invariant(scores, scale, shift):
    named = {f"m{i}": s for i, s in enumerate(scores)}
    moved = {k: scale * v + shift for k, v in named.items()}
    if len(set(moved.values())) == len(set(scores)):
        assert rank_methods(moved) == rank_methods(named)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(2, 5), st.randoms(use_true_random=False))
def test_property_partition_permutation_invariant(rows, cols, rnd):
    matrix = np.array([[rnd.random() for _ in range(cols)] for _ in range(rows)])
    vp = variance_partition(matrix)
    shuffled = matrix[rnd.sample(range(rows), rows)][:, rnd.sample(range(cols), cols)]
    vp2 = variance_partition(shuffled)
    for a, b in ((vp.pct_llm, vp2.pct_llm), (vp.pct_method, vp2.pct_method)):
        assert a == pytest.approx(b, abs=1e-9)
    total = 0.0 if vp.degenerate else 100.0
    assert vp.degenerate == (np.ptp(matrix) == 0)
    assert vp.pct_llm + vp.pct_method + vp.pct_interaction_residual == pytest.approx(total, abs=1e-9)
    assert min(vp.pct_llm, vp.pct_method, vp.pct_interaction_residual) >= 0

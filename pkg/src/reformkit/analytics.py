"""Rank stability analytics over method x dataset x LLM score grids.

RankCV, pairwise Spearman agreement between LLM configurations, two-way
variance partitioning and per-query delta distributions.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .exceptions import ParseError, PreconditionError, ValidationError
from .utils import atomic_write_text

logger = logging.getLogger(__name__)


def _as_items(values) -> tuple[list, np.ndarray]:
    if isinstance(values, Mapping):
        keys = list(values)
        arr = np.array([values[k] for k in keys], dtype=np.float64)
    else:
        arr = np.asarray(values, dtype=np.float64).ravel()
        keys = list(range(arr.size))
    return keys, arr


def rank_methods(scores: Mapping[str, float]) -> dict[str, float]:
    """Rank by descending score from 1 (best); ties share their average rank."""
    keys, arr = _as_items(scores)
    if not keys:
        raise PreconditionError("nothing to rank")
    if not np.all(np.isfinite(arr)):
        bad = [k for k, v in zip(keys, arr) if not math.isfinite(v)]
        raise PreconditionError(f"non-finite scores for {bad}")
    ranks = stats.rankdata(-arr, method="average")
    return {k: float(r) for k, r in zip(keys, ranks)}


def rank_cv(ranks, ddof: int = 1) -> float:
    """Coefficient of variation of a method's ranks across datasets, in percent.

    ``ddof=1`` (default) uses the sample standard deviation; pass ``ddof=0``
    for the population form.
    """
    _, arr = _as_items(ranks)
    if arr.size < 2:
        raise PreconditionError("rank_cv needs ranks from at least 2 datasets")
    if not np.all(np.isfinite(arr)) or np.any(arr < 1):
        raise PreconditionError("ranks must be finite and >= 1")
    if np.ptp(arr) == 0:
        # np.std can leave rounding noise on equal values
        return 0.0
    return float(np.std(arr, ddof=ddof) / np.mean(arr) * 100.0)


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p: float
    method: str
    n: int

    @property
    def stars(self) -> str:
        return significance_stars(self.p)


def significance_stars(p: float) -> str:
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"


def _aligned(a, b) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, Mapping) and isinstance(b, Mapping):
        if set(a) != set(b):
            diff = sorted(set(a) ^ set(b), key=str)
            raise PreconditionError(f"rankings cover different methods: {diff}")
        keys = sorted(a, key=str)
        return (np.array([a[k] for k in keys], dtype=np.float64),
                np.array([b[k] for k in keys], dtype=np.float64))
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise PreconditionError(f"rankings differ in length ({x.size} vs {y.size})")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc, yc = x - x.mean(), y - y.mean()
    return float(np.dot(xc, yc) / math.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))


def spearman(
    ranks_a,
    ranks_b,
    method: str = "t_approx",
    n_permutations: int = 100_000,
    seed: int = 0,
) -> SpearmanResult:
    """Spearman's rho as the Pearson correlation of (average-tie) rank vectors.

    Two-sided p-value from the t approximation with n-2 degrees of freedom,
    or from a seeded Monte Carlo permutation test.
    """
    x, y = _aligned(ranks_a, ranks_b)
    n = x.size
    if n < 3:
        raise PreconditionError("spearman needs at least 3 paired ranks")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise PreconditionError("ranks must be finite")
    # re-ranking makes the statistic depend on order only
    x = stats.rankdata(x, method="average")
    y = stats.rankdata(y, method="average")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise PreconditionError("rho is undefined for a constant ranking")
    rho = min(1.0, max(-1.0, _pearson(x, y)))

    if method == "t_approx":
        if abs(rho) >= 1.0:
            p = 0.0
        else:
            t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
            p = float(2.0 * stats.t.sf(abs(t), n - 2))
    elif method == "permutation":
        p = _permutation_p(x, y, rho, n_permutations, seed)
    else:
        raise PreconditionError(f"unknown spearman method {method!r}")
    return SpearmanResult(rho=rho, p=min(1.0, p), method=method, n=n)


def _permutation_p(x, y, rho, n_permutations, seed, batch=20_000) -> float:
    rng = np.random.default_rng(seed)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    threshold = abs(rho) - 1e-12
    extreme = 0
    done = 0
    while done < n_permutations:
        size = min(batch, n_permutations - done)
        perms = rng.permuted(np.broadcast_to(yc, (size, yc.size)), axis=1)
        r = perms @ xc / denom
        extreme += int(np.count_nonzero(np.abs(r) >= threshold))
        done += size
    return (extreme + 1) / (n_permutations + 1)


@dataclass(frozen=True)
class VariancePartition:
    pct_llm: float
    pct_method: float
    pct_interaction_residual: float
    ss_total: float = 0.0
    degenerate: bool = False

    @property
    def pct_additive(self) -> float:
        return self.pct_llm + self.pct_method

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pct_additive"] = self.pct_additive
        return out


def variance_partition(matrix) -> VariancePartition:
    """Two-way sum-of-squares split of a methods x LLMs score matrix.

    Rows are methods, columns LLM configurations. With one observation per
    cell the interaction and residual terms are not separable and are
    reported together.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise PreconditionError(f"need a complete matrix with >= 2 rows and columns, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise PreconditionError("matrix has missing or non-finite cells")
    n_methods, n_llms = x.shape
    grand = x.mean()
    method_means = x.mean(axis=1)
    llm_means = x.mean(axis=0)
    ss_total = float(np.sum((x - grand) ** 2))
    ss_llm = float(n_methods * np.sum((llm_means - grand) ** 2))
    ss_method = float(n_llms * np.sum((method_means - grand) ** 2))
    residual = x - method_means[:, None] - llm_means[None, :] + grand
    ss_inter = float(np.sum(residual**2))
    if ss_total == 0.0:
        return VariancePartition(0.0, 0.0, 0.0, 0.0, degenerate=True)
    # ss_inter computed directly so it cannot go negative through cancellation
    scale = 100.0 / (ss_llm + ss_method + ss_inter)
    return VariancePartition(
        pct_llm=ss_llm * scale,
        pct_method=ss_method * scale,
        pct_interaction_residual=ss_inter * scale,
        ss_total=ss_total,
    )


@dataclass(frozen=True)
class DeltaSummary:
    n: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    mean: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


@dataclass
class DeltaDistribution:
    summary: DeltaSummary
    points: list[tuple[str, float]]
    group: dict = field(default_factory=dict)


def delta_distribution(
    reformulated: Mapping[str, float], baseline: Mapping[str, float], group: Optional[Mapping] = None
) -> DeltaDistribution:
    """Per-query delta = reformulated - baseline, with quartiles by linear interpolation."""
    if set(reformulated) != set(baseline):
        diff = sorted(set(reformulated) ^ set(baseline))
        raise PreconditionError(f"query sets differ; symmetric difference: {diff}")
    if not reformulated:
        raise PreconditionError("no queries to compare")
    qids = sorted(reformulated)
    deltas = np.array([reformulated[q] - baseline[q] for q in qids], dtype=np.float64)
    q1, med, q3 = np.percentile(deltas, [25, 50, 75], method="linear")
    summary = DeltaSummary(
        n=int(deltas.size),
        minimum=float(deltas.min()),
        q1=float(q1),
        median=float(med),
        q3=float(q3),
        maximum=float(deltas.max()),
        mean=float(deltas.mean()),
    )
    return DeltaDistribution(summary, list(zip(qids, deltas.tolist())), dict(group or {}))


# score grids


GRID_COLUMNS = ("method", "dataset", "llm", "metric", "value")


class ScoreGrid:
    """Long-form (method, dataset, llm, metric) -> value table."""

    def __init__(self, records: Iterable[tuple[str, str, str, str, float]] = ()):
        self._values: dict[tuple[str, str, str, str], float] = {}
        self.methods: list[str] = []
        self.datasets: list[str] = []
        self.llms: list[str] = []
        self.metrics: list[str] = []
        for rec in records:
            self.add(*rec)

    def add(self, method, dataset, llm, metric, value):
        key = (method, dataset, llm, metric)
        if key in self._values:
            raise ValidationError(f"duplicate grid cell {key}")
        value = float(value)
        self._values[key] = value
        for axis, item in zip((self.methods, self.datasets, self.llms, self.metrics), key):
            if item not in axis:
                axis.append(item)

    def value(self, method, dataset, llm, metric) -> float:
        try:
            return self._values[(method, dataset, llm, metric)]
        except KeyError:
            raise ValidationError(f"missing grid cell {(method, dataset, llm, metric)}") from None

    def require_complete(self, metric: str, datasets: Optional[Sequence[str]] = None):
        missing = [
            (m, d, l)
            for m in self.methods
            for d in (datasets or self.datasets)
            for l in self.llms
            if (m, d, l, metric) not in self._values
        ]
        if missing:
            raise ValidationError(f"grid incomplete for {metric}; missing {missing[:5]}"
                                  + (" ..." if len(missing) > 5 else ""))

    def method_scores(self, dataset, llm, metric) -> dict[str, float]:
        return {m: self.value(m, dataset, llm, metric) for m in self.methods}

    def averaged_scores(self, llm, metric, datasets: Sequence[str]) -> dict[str, float]:
        return {m: math.fsum(self.value(m, d, llm, metric) for d in datasets) / len(datasets) for m in self.methods}

    def __len__(self):
        return len(self._values)


def read_score_grid(path) -> ScoreGrid:
    """Read ``method,dataset,llm,metric,value`` CSV."""
    grid = ScoreGrid()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:5]) != GRID_COLUMNS:
            raise ParseError(f"expected header {','.join(GRID_COLUMNS)}", path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                grid.add(row["method"], row["dataset"], row["llm"], row["metric"], float(row["value"]))
            except (ValueError, TypeError) as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
    return grid


def rank_matrix(grid: ScoreGrid, metric: str) -> dict[tuple[str, str], dict[str, float]]:
    """Ranks of all methods within each (llm, dataset) slice."""
    grid.require_complete(metric)
    return {
        (llm, d): rank_methods(grid.method_scores(d, llm, metric))
        for llm in grid.llms
        for d in grid.datasets
    }


@dataclass(frozen=True)
class RankCVRow:
    method: str
    llm: str
    rank_cv: float
    mean_rank: float
    ranks: tuple[float, ...]


def rank_cv_table(grid: ScoreGrid, metric: str, ddof: int = 1) -> list[RankCVRow]:
    ranks = rank_matrix(grid, metric)
    rows = []
    for llm in grid.llms:
        for m in grid.methods:
            r = [ranks[(llm, d)][m] for d in grid.datasets]
            rows.append(RankCVRow(m, llm, rank_cv(r, ddof=ddof), float(np.mean(r)), tuple(r)))
    return rows


@dataclass(frozen=True)
class SpearmanRow:
    llm_a: str
    llm_b: str
    rho: float
    p: float
    stars: str
    method: str


def spearman_table(
    grid: ScoreGrid,
    metric: str,
    datasets: Optional[Sequence[str]] = None,
    method: str = "t_approx",
    n_permutations: int = 100_000,
    seed: int = 0,
) -> list[SpearmanRow]:
    """Pairwise agreement of method rankings between LLM configurations.

    Scores are averaged over ``datasets`` (all by default) before ranking.
    """
    datasets = list(datasets or grid.datasets)
    grid.require_complete(metric, datasets)
    ranks = {llm: rank_methods(grid.averaged_scores(llm, metric, datasets)) for llm in grid.llms}
    rows = []
    for a, b in itertools.combinations(grid.llms, 2):
        try:
            res = spearman(ranks[a], ranks[b], method=method, n_permutations=n_permutations, seed=seed)
        except PreconditionError as exc:
            # one tied-everywhere configuration should not sink the whole table
            logger.warning("spearman %s vs %s undefined: %s", a, b, exc)
            rows.append(SpearmanRow(a, b, math.nan, math.nan, "undefined", method))
            continue
        rows.append(SpearmanRow(a, b, res.rho, res.p, res.stars, res.method))
    return rows


def variance_table(grid: ScoreGrid, metric: str, datasets: Optional[Sequence[str]] = None) -> VariancePartition:
    """Variance partition of the methods x LLMs matrix (scores averaged over datasets)."""
    datasets = list(datasets or grid.datasets)
    grid.require_complete(metric, datasets)
    matrix = [[grid.averaged_scores(llm, metric, datasets)[m] for llm in grid.llms] for m in grid.methods]
    return variance_partition(matrix)


def _csv(rows: Iterable[Sequence], header: Sequence[str]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


def write_rank_cv_csv(rows: Sequence[RankCVRow], datasets: Sequence[str], path) -> Path:
    header = ["method", "llm", "rank_cv", "mean_rank", *[f"rank_{d}" for d in datasets]]
    body = [[r.method, r.llm, f"{r.rank_cv:.6f}", f"{r.mean_rank:.6f}", *[f"{x:g}" for x in r.ranks]] for r in rows]
    return atomic_write_text(path, _csv(body, header))


def write_spearman_csv(rows: Sequence[SpearmanRow], path) -> Path:
    header = ["llm_a", "llm_b", "rho", "p", "stars", "test"]
    body = [[r.llm_a, r.llm_b, f"{r.rho:.6f}", f"{r.p:.6g}", r.stars, r.method] for r in rows]
    return atomic_write_text(path, _csv(body, header))


def write_variance_json(partition: VariancePartition, path, extra: Optional[dict] = None) -> Path:
    data = partition.to_dict()
    data.update(extra or {})
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


DELTA_GROUP_KEYS = ("dataset", "retriever", "method", "llm")


def write_delta_csv(distributions: Sequence[DeltaDistribution], path, summary_path=None) -> Path:
    """Per-point CSV plus an optional per-group summary CSV."""
    keys = [k for k in DELTA_GROUP_KEYS if any(k in d.group for d in distributions)]
    points = [[*(d.group.get(k, "") for k in keys), qid, f"{delta:.6f}"]
              for d in distributions for qid, delta in d.points]
    atomic_write_text(path, _csv(points, [*keys, "query_id", "delta"]))
    if summary_path is not None:
        rows = []
        for d in distributions:
            s = d.summary
            rows.append([*(d.group.get(k, "") for k in keys), s.n,
                         *(f"{v:.6f}" for v in (s.minimum, s.q1, s.median, s.q3, s.maximum, s.iqr, s.mean))])
        atomic_write_text(summary_path, _csv(rows, [*keys, "n", "min", "q1", "median", "q3", "max", "iqr", "mean"]))
    return Path(path)

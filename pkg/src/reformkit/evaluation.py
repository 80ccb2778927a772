"""TREC qrels/run handling and effectiveness metrics (nDCG@k, Recall@k)."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .exceptions import ParseError, ValidationError
from .utils import atomic_write_text, check_positive_int

logger = logging.getLogger(__name__)


class Qrels:
    """Graded judgments keyed by (query_id, doc_id)."""

    def __init__(self, judgments: Optional[Mapping[str, Mapping[str, int]]] = None):
        self._data: dict[str, dict[str, int]] = {}
        for qid, docs in (judgments or {}).items():
            self._data[qid] = {d: int(g) for d, g in docs.items()}

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._data.get(query_id, {}).get(doc_id, 0)

    def for_query(self, query_id: str) -> dict[str, int]:
        return dict(self._data.get(query_id, {}))

    @property
    def query_ids(self) -> list[str]:
        return list(self._data)

    def __contains__(self, query_id) -> bool:
        return query_id in self._data

    def __len__(self) -> int:
        """Number of judged (query, doc) pairs."""
        return sum(len(v) for v in self._data.values())

    def to_dict(self) -> dict[str, dict[str, int]]:
        return {q: dict(d) for q, d in self._data.items()}


def parse_qrels(path) -> Qrels:
    """Parse ``qid 0 docid grade`` lines; duplicate pairs keep the last grade."""
    data: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 4:
                raise ParseError(f"expected 4 fields, got {len(fields)}", path=path, line=lineno)
            qid, _, docid, grade = fields
            try:
                value = int(grade)
            except ValueError:
                raise ParseError(f"non-integer grade {grade!r}", path=path, line=lineno) from None
            if value < 0:
                raise ParseError(f"negative grade {value}", path=path, line=lineno)
            judged = data.setdefault(qid, {})
            if docid in judged:
                logger.warning(
                    "%s:%d: duplicate judgment for (%s, %s); %d replaces %d",
                    path, lineno, qid, docid, value, judged[docid],
                )
            judged[docid] = value
    return Qrels(data)


def write_qrels(qrels: Qrels, path) -> Path:
    lines = [
        f"{qid} 0 {doc} {grade}\n"
        for qid, docs in qrels.to_dict().items()
        for doc, grade in docs.items()
    ]
    return atomic_write_text(path, "".join(lines))


@dataclass
class RunList:
    """Ranked results per query, in TREC run semantics."""

    results: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    run_tag: str = "reformkit"

    def __post_init__(self):
        cleaned = {}
        for qid, entries in self.results.items():
            entries = [(str(d), float(s)) for d, s in entries]
            seen = set()
            for rank, (doc, score) in enumerate(entries, start=1):
                if doc in seen:
                    raise ValidationError(f"query {qid}: duplicate document {doc!r}")
                seen.add(doc)
                if rank > 1 and score > entries[rank - 2][1]:
                    raise ValidationError(f"query {qid}: score increases at rank {rank}")
            cleaned[qid] = entries
        self.results = cleaned
        if not self.run_tag or any(c.isspace() for c in self.run_tag):
            raise ValidationError(f"run tag must be a non-empty token, got {self.run_tag!r}")

    @property
    def query_ids(self) -> list[str]:
        return list(self.results)

    def __getitem__(self, query_id):
        return self.results[query_id]

    def __len__(self) -> int:
        return len(self.results)

    def to_trec(self) -> str:
        out = io.StringIO()
        for qid, entries in self.results.items():
            for rank, (doc, score) in enumerate(entries, start=1):
                out.write(f"{qid} Q0 {doc} {rank} {score:.6f} {self.run_tag}\n")
        return out.getvalue()


def write_run(run: RunList, path) -> Path:
    """Write ``qid Q0 docid rank score tag`` lines with 6-decimal scores."""
    return atomic_write_text(path, run.to_trec())


def parse_run(path) -> RunList:
    """Parse a run file, checking that ranks are contiguous from 1 per query."""
    results: dict[str, list[tuple[int, str, float]]] = {}
    tag = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 6:
                raise ParseError(f"expected 6 fields, got {len(fields)}", path=path, line=lineno)
            qid, _, doc, rank, score, run_tag = fields
            try:
                entry = (int(rank), doc, float(score))
            except ValueError:
                raise ParseError("rank must be integer and score numeric", path=path, line=lineno) from None
            results.setdefault(qid, []).append(entry)
            tag = tag or run_tag
    ordered = {}
    for qid, entries in results.items():
        entries.sort()
        ranks = [r for r, _, _ in entries]
        if ranks != list(range(1, len(entries) + 1)):
            raise ValidationError(f"query {qid}: ranks are not contiguous from 1 ({_describe(ranks)})")
        docs = [d for _, d, _ in entries]
        if len(set(docs)) != len(docs):
            raise ValidationError(f"query {qid}: duplicate documents")
        ordered[qid] = [(d, s) for _, d, s in entries]
    return RunList(ordered, run_tag=tag or "reformkit")


def _describe(ranks):
    shown = ",".join(map(str, ranks[:10]))
    return shown + ("..." if len(ranks) > 10 else "")


@dataclass
class EvalReport:
    """Per-query and mean values of one metric at one cutoff."""

    metric: str
    k: int
    per_query: dict[str, float]
    excluded: list[str] = field(default_factory=list)
    min_rel: Optional[int] = None

    @property
    def mean(self) -> float:
        if not self.per_query:
            return 0.0
        return math.fsum(self.per_query.values()) / len(self.per_query)

    @property
    def name(self) -> str:
        return f"{self.metric}@{self.k}"

    def summary(self) -> dict:
        out = {
            "metric": self.metric,
            "k": self.k,
            "mean": self.mean,
            "num_queries": len(self.per_query),
            "excluded": list(self.excluded),
        }
        if self.min_rel is not None:
            out["min_rel"] = self.min_rel
        return out

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["query_id", "value"])
        for qid, value in self.per_query.items():
            writer.writerow([qid, f"{value:.6f}"])
        return out.getvalue()

    def save(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` (per query) and ``<stem>.json`` (summary)."""
        stem = Path(stem)
        csv_path = atomic_write_text(stem.with_name(stem.name + ".csv"), self.to_csv())
        json_path = atomic_write_text(
            stem.with_name(stem.name + ".json"), json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"
        )
        return csv_path, json_path


def _dcg(gains: Iterable[float]) -> float:
    return math.fsum(g / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg_at_k(run: RunList, qrels: Qrels, k: int) -> EvalReport:
    """nDCG@k with linear gain, evaluated in run rank order.

    Unjudged documents have zero gain. Queries whose judgments contain no
    positive grade are excluded from the mean and listed in ``excluded``.
    """
    k = check_positive_int(k, "k")
    per_query: dict[str, float] = {}
    excluded: list[str] = []
    for qid in sorted(run.query_ids):
        if qid not in qrels:
            logger.warning("query %s has no judgments; excluded from ndcg@%d", qid, k)
            excluded.append(qid)
            continue
        judged = qrels.for_query(qid)
        ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:k]
        if not ideal:
            excluded.append(qid)
            continue
        gains = [max(judged.get(doc, 0), 0) for doc, _ in run[qid][:k]]
        per_query[qid] = _dcg(gains) / _dcg(ideal)
    return EvalReport("ndcg", k, per_query, excluded)


def recall_at_k(run: RunList, qrels: Qrels, k: int, min_rel: int = 1) -> EvalReport:
    """Fraction of documents graded >= min_rel that appear in the top k."""
    k = check_positive_int(k, "k")
    per_query: dict[str, float] = {}
    excluded: list[str] = []
    for qid in sorted(run.query_ids):
        relevant = {d for d, g in qrels.for_query(qid).items() if g >= min_rel}
        if not relevant:
            logger.warning("query %s has no documents graded >= %d; excluded from recall@%d", qid, min_rel, k)
            excluded.append(qid)
            continue
        hits = sum(1 for doc, _ in run[qid][:k] if doc in relevant)
        per_query[qid] = hits / len(relevant)
    return EvalReport("recall", k, per_query, excluded, min_rel=min_rel)


METRICS = {"ndcg": ndcg_at_k, "recall": recall_at_k}


def parse_metric(spec: str) -> tuple[str, int]:
    """``"ndcg@10"`` -> ``("ndcg", 10)``."""
    name, _, cutoff = spec.partition("@")
    name = name.strip().lower()
    if name not in METRICS or not cutoff.isdigit() or int(cutoff) < 1:
        raise ValueError(f"unknown metric {spec!r}; expected ndcg@K or recall@K")
    return name, int(cutoff)


def evaluate(run: RunList, qrels: Qrels, metric: str, k: int, min_rel: int = 1) -> EvalReport:
    if metric == "recall":
        return recall_at_k(run, qrels, k, min_rel=min_rel)
    if metric == "ndcg":
        return ndcg_at_k(run, qrels, k)
    raise ValueError(f"unknown metric {metric!r}")


def read_report_csv(path) -> dict[str, float]:
    with open(path, encoding="utf-8", newline="") as fh:
        return {row["query_id"]: float(row["value"]) for row in csv.DictReader(fh)}


def mean_of(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0

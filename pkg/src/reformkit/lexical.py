"""Inverted index, BM25 scoring and RM3 pseudo-relevance feedback."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, TextIO

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import Analyzer, CorpusHandle, Document, Query
from .exceptions import IndexStateError, ParseError, PreconditionError
from .ranking import RankedList, top_k
from .utils import atomic_write_text, check_positive_int, check_unit_interval

logger = logging.getLogger(__name__)

INDEX_FORMAT = "reformkit-index"
INDEX_VERSION = 1

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4
DEFAULT_FB_DOCS = 10
DEFAULT_FB_TERMS = 10
DEFAULT_ORIG_WEIGHT = 0.5


class InvertedIndex:
    """Immutable term -> postings index with document statistics.

    Documents are stored in ascending doc_id order, so internal document
    numbers are also the tie-break order and postings are sorted by doc_id.
    A forward index (document -> term frequencies) is kept for feedback.
    """

    def __init__(self):
        self.built = False
        self.analyzer = Analyzer()
        self.doc_ids: list[str] = []
        self.terms: list[str] = []
        self.term_ids: dict[str, int] = {}
        self.doc_lengths = np.zeros(0, dtype=np.int64)
        self.post_ptr = np.zeros(1, dtype=np.int64)
        self.post_docs = np.zeros(0, dtype=np.int64)
        self.post_tfs = np.zeros(0, dtype=np.int64)
        self.fwd_ptr = np.zeros(1, dtype=np.int64)
        self.fwd_terms = np.zeros(0, dtype=np.int64)
        self.fwd_tfs = np.zeros(0, dtype=np.int64)
        self._doc_pos: dict[str, int] = {}

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def avg_doc_len(self) -> float:
        return float(self.doc_lengths.mean()) if self.doc_count else 0.0

    @property
    def vocabulary_size(self) -> int:
        return len(self.terms)

    def _require_built(self):
        if not self.built:
            raise IndexStateError("index has not been built")

    def df(self, term: str) -> int:
        tid = self.term_ids.get(term)
        if tid is None:
            return 0
        return int(self.post_ptr[tid + 1] - self.post_ptr[tid])

    def postings(self, term: str) -> list[tuple[str, int]]:
        tid = self.term_ids.get(term)
        if tid is None:
            return []
        lo, hi = self.post_ptr[tid], self.post_ptr[tid + 1]
        return [(self.doc_ids[d], int(tf)) for d, tf in zip(self.post_docs[lo:hi], self.post_tfs[lo:hi])]

    def _posting_arrays(self, term: str):
        tid = self.term_ids.get(term)
        if tid is None:
            return None
        lo, hi = self.post_ptr[tid], self.post_ptr[tid + 1]
        return self.post_docs[lo:hi], self.post_tfs[lo:hi]

    def doc_length(self, doc_id: str) -> int:
        return int(self.doc_lengths[self._doc_pos[doc_id]])

    def doc_vector(self, doc_id: str) -> dict[str, int]:
        i = self._doc_pos[doc_id]
        lo, hi = self.fwd_ptr[i], self.fwd_ptr[i + 1]
        return {self.terms[t]: int(tf) for t, tf in zip(self.fwd_terms[lo:hi], self.fwd_tfs[lo:hi])}

    def top_terms_by_df(self, n: int) -> list[str]:
        """The n terms with the highest document frequency (ties by term)."""
        dfs = np.diff(self.post_ptr)
        order = np.lexsort((np.arange(len(self.terms)), -dfs))[:n]
        return [self.terms[i] for i in order]

    def _finalize(self):
        self._doc_pos = {d: i for i, d in enumerate(self.doc_ids)}
        self.term_ids = {t: i for i, t in enumerate(self.terms)}
        self.built = True

    # persistence

    def save(self, directory) -> Path:
        self._require_built()
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "doc_count": self.doc_count,
            "vocabulary_size": self.vocabulary_size,
            "avg_doc_len": self.avg_doc_len,
            "analyzer": self.analyzer.get_config(),
        }
        for name in ("doc_lengths", "post_ptr", "post_docs", "post_tfs", "fwd_ptr", "fwd_terms", "fwd_tfs"):
            np.save(directory / f"{name}.npy", getattr(self, name), allow_pickle=False)
        atomic_write_text(directory / "doc_ids.json", json.dumps(self.doc_ids, ensure_ascii=False))
        atomic_write_text(directory / "terms.json", json.dumps(self.terms, ensure_ascii=False))
        atomic_write_text(directory / "meta.json", json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "InvertedIndex":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "meta.json").read_text())
        except FileNotFoundError:
            raise IndexStateError(f"no index at {directory}") from None
        if meta.get("format") != INDEX_FORMAT:
            raise ParseError("not an index directory", path=directory)
        if meta.get("version") != INDEX_VERSION:
            raise ParseError(f"unsupported index version {meta.get('version')}", path=directory)
        index = cls()
        index.analyzer = Analyzer.from_config(meta["analyzer"])
        index.doc_ids = json.loads((directory / "doc_ids.json").read_text(encoding="utf-8"))
        index.terms = json.loads((directory / "terms.json").read_text(encoding="utf-8"))
        for name in ("doc_lengths", "post_ptr", "post_docs", "post_tfs", "fwd_ptr", "fwd_terms", "fwd_tfs"):
            setattr(index, name, np.load(directory / f"{name}.npy", allow_pickle=False))
        index._finalize()
        return index

    def dump_postings(self, out: TextIO) -> None:
        """Write ``term<TAB>df<TAB>doc:tf ...`` lines in term order."""
        self._require_built()
        for term in self.terms:
            plist = " ".join(f"{d}:{tf}" for d, tf in self.postings(term))
            out.write(f"{term}\t{self.df(term)}\t{plist}\n")

    def __repr__(self):
        if not self.built:
            return "InvertedIndex(unbuilt)"
        return f"InvertedIndex(doc_count={self.doc_count}, terms={self.vocabulary_size})"


def build_index(corpus: Iterable[Document], analyzer: Optional[Analyzer] = None) -> InvertedIndex:
    """Tokenize every document and build postings plus statistics."""
    analyzer = analyzer or Analyzer()
    docs = sorted(corpus, key=lambda d: d.doc_id)
    if not docs:
        raise PreconditionError("cannot build an index over an empty corpus")
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths = np.zeros(len(docs), dtype=np.int64)
    doc_counts = []
    for i, doc in enumerate(docs):
        if i and docs[i - 1].doc_id == doc.doc_id:
            raise PreconditionError(f"duplicate doc_id {doc.doc_id!r}")
        tokens = analyzer.tokenize(doc.contents)
        lengths[i] = len(tokens)
        counts = Counter(tokens)
        doc_counts.append(counts)
        for term, tf in counts.items():
            postings.setdefault(term, []).append((i, tf))

    index = InvertedIndex()
    index.analyzer = analyzer
    index.doc_ids = [d.doc_id for d in docs]
    index.terms = sorted(postings)
    term_ids = {t: j for j, t in enumerate(index.terms)}
    sizes = np.array([len(postings[t]) for t in index.terms], dtype=np.int64)
    index.post_ptr = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
    flat = [p for t in index.terms for p in postings[t]]
    index.post_docs = np.array([d for d, _ in flat], dtype=np.int64)
    index.post_tfs = np.array([tf for _, tf in flat], dtype=np.int64)
    index.doc_lengths = lengths

    fwd_sizes = np.array([len(c) for c in doc_counts], dtype=np.int64)
    index.fwd_ptr = np.concatenate(([0], np.cumsum(fwd_sizes))).astype(np.int64)
    fwd = [sorted((term_ids[t], tf) for t, tf in c.items()) for c in doc_counts]
    index.fwd_terms = np.array([t for row in fwd for t, _ in row], dtype=np.int64)
    index.fwd_tfs = np.array([tf for row in fwd for _, tf in row], dtype=np.int64)
    index._finalize()
    return index


@dataclass(frozen=True)
class WeightedQuery:
    """Bag of terms with non-negative weights."""

    terms: Mapping[str, float]
    flags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        terms = {}
        for term, w in self.terms.items():
            w = float(w)
            if not math.isfinite(w) or w < 0:
                raise PreconditionError(f"weight for {term!r} must be finite and >= 0, got {w}")
            terms[term] = w
        if not any(w > 0 for w in terms.values()):
            raise PreconditionError("weighted query needs at least one positive weight")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "WeightedQuery":
        return cls(dict(Counter(tokens)))


def _bm25_scores(index: InvertedIndex, weights: Mapping[str, float], k1: float, b: float):
    if not index.built:
        raise IndexStateError("index has not been built")
    n = index.doc_count
    scores = np.zeros(n, dtype=np.float64)
    touched = np.zeros(n, dtype=bool)
    avg_len = index.avg_doc_len or 1.0
    norms = k1 * (1.0 - b + b * index.doc_lengths / avg_len)
    for term in sorted(weights):
        w = weights[term]
        arrays = index._posting_arrays(term) if w > 0 else None
        if arrays is None:
            continue
        docs, tfs = arrays
        df = docs.size
        idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        scores[docs] += w * idf * tfs * (k1 + 1.0) / (tfs + norms[docs])
        touched[docs] = True
    return scores, np.flatnonzero(touched)


def bm25_search(
    index: InvertedIndex, query: Sequence[str], k: int, k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> RankedList:
    """Top-k BM25 over an analyzed query; repeated terms count repeatedly."""
    k = check_positive_int(k, "k")
    if not index.built:
        raise IndexStateError("index has not been built")
    if not query:
        return RankedList()
    scores, candidates = _bm25_scores(index, Counter(query), k1, b)
    return top_k(index.doc_ids, scores, candidates, k)


def weighted_search(
    index: InvertedIndex, wq: WeightedQuery, k: int, k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> RankedList:
    """BM25 where each term's contribution is multiplied by its weight."""
    k = check_positive_int(k, "k")
    if not isinstance(wq, WeightedQuery):
        wq = WeightedQuery(wq)
    scores, candidates = _bm25_scores(index, wq.terms, k1, b)
    return top_k(index.doc_ids, scores, candidates, k)


def rm3_expand(
    index: InvertedIndex,
    query: Sequence[str],
    fb_docs: int = DEFAULT_FB_DOCS,
    fb_terms: int = DEFAULT_FB_TERMS,
    orig_weight: float = DEFAULT_ORIG_WEIGHT,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> WeightedQuery:
    """RM3: relevance model from the top BM25 documents, interpolated with the query.

    Each feedback document contributes P(t|d) = tf / |d|, weighted by its
    BM25 score divided by the sum of feedback scores. The fb_terms heaviest
    terms are kept and renormalized, then mixed with the maximum-likelihood
    query model: orig_weight * P(t|q) + (1 - orig_weight) * P_rm(t).
    """
    fb_docs = check_positive_int(fb_docs, "fb_docs")
    fb_terms = check_positive_int(fb_terms, "fb_terms")
    orig_weight = check_unit_interval(orig_weight, "orig_weight")
    if not query:
        raise PreconditionError("query has no terms")
    qcounts = Counter(query)
    qlen = sum(qcounts.values())
    original = {t: c / qlen for t, c in qcounts.items()}

    feedback = bm25_search(index, query, fb_docs, k1=k1, b=b)
    if len(feedback) == 0:
        return WeightedQuery(original, flags=("no_feedback",))

    total = sum(feedback.scores)
    relevance: dict[str, float] = {}
    for doc_id, score in feedback:
        length = index.doc_length(doc_id)
        doc_weight = score / total
        for term, tf in index.doc_vector(doc_id).items():
            relevance[term] = relevance.get(term, 0.0) + doc_weight * tf / length
    kept = sorted(relevance.items(), key=lambda kv: (-kv[1], kv[0]))[:fb_terms]
    mass = sum(w for _, w in kept)
    model = {t: w / mass for t, w in kept}

    mixed: dict[str, float] = {}
    for term in sorted(set(original) | set(model)):
        w = orig_weight * original.get(term, 0.0) + (1.0 - orig_weight) * model.get(term, 0.0)
        if w > 0:
            mixed[term] = w
    norm = sum(mixed.values())
    return WeightedQuery({t: w / norm for t, w in mixed.items()})


class BM25Retriever(BaseEstimator):
    """Lexical retriever with a fit/search interface.

    ``fit`` builds the inverted index from a corpus; ``search`` and
    ``predict`` score analyzed query text with BM25. RM3 is available via
    ``rm3`` and ``search_weighted``.
    """

    kind = "lexical"

    def __init__(
        self,
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
        stem: bool = False,
        stopwords=None,
        fb_docs: int = DEFAULT_FB_DOCS,
        fb_terms: int = DEFAULT_FB_TERMS,
        orig_weight: float = DEFAULT_ORIG_WEIGHT,
    ):
        self.k1 = k1
        self.b = b
        self.stem = stem
        self.stopwords = stopwords
        self.fb_docs = fb_docs
        self.fb_terms = fb_terms
        self.orig_weight = orig_weight

    def fit(self, corpus, y=None):
        if not isinstance(corpus, CorpusHandle):
            corpus = CorpusHandle(corpus)
        analyzer = Analyzer(stem=self.stem, stopwords=self.stopwords)
        self.index_ = build_index(corpus, analyzer)
        self.corpus_ = corpus
        return self

    @classmethod
    def from_index(cls, index: InvertedIndex, corpus: Optional[CorpusHandle] = None, **params):
        """Wrap a prebuilt (e.g. loaded) index."""
        cfg = index.analyzer.get_config()
        retriever = cls(stem=cfg["stem"], stopwords=cfg["stopwords"] or None, **params)
        retriever.index_ = index
        retriever.corpus_ = corpus
        return retriever

    def analyze(self, text: str) -> list[str]:
        check_is_fitted(self, "index_")
        return self.index_.analyzer.tokenize(text)

    def search(self, text: str, k: int = 1000) -> RankedList:
        return bm25_search(self.index_, self.analyze(text), k, self.k1, self.b)

    def search_weighted(self, wq: WeightedQuery, k: int = 1000) -> RankedList:
        check_is_fitted(self, "index_")
        return weighted_search(self.index_, wq, k, self.k1, self.b)

    def rm3(self, text: str) -> WeightedQuery:
        tokens = self.analyze(text)
        return rm3_expand(
            self.index_, tokens, self.fb_docs, self.fb_terms, self.orig_weight, self.k1, self.b
        )

    def document(self, doc_id: str) -> Document:
        check_is_fitted(self, "index_")
        if self.corpus_ is None:
            raise IndexStateError("retriever has no attached corpus; document text unavailable")
        return self.corpus_[doc_id]

    def top_terms_by_df(self, n: int) -> list[str]:
        check_is_fitted(self, "index_")
        return self.index_.top_terms_by_df(n)

    def predict(self, queries: Iterable[Query], k: int = 1000, run_tag: str = "bm25"):
        """Run every query and collect a RunList."""
        from .evaluation import RunList

        return RunList({q.query_id: list(self.search(q.text, k)) for q in queries}, run_tag=run_tag)

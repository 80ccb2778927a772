"""Exact dense and sparse-impact retrieval over externally produced representations."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import threading
import time
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol

import httpx
import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .corpus import Analyzer, Query
from .exceptions import ParseError, PreconditionError, ProtocolError, TransportError
from .ranking import RankedList, top_k
from .utils import atomic_write_bytes, check_positive_int

logger = logging.getLogger(__name__)


class DenseVectorStore:
    """Fixed-dimension document vectors scored by dot product or cosine."""

    def __init__(self, vectors: Mapping[str, Iterable[float]], similarity: str = "dot"):
        if similarity not in ("dot", "cosine"):
            raise PreconditionError(f"similarity must be 'dot' or 'cosine', got {similarity!r}")
        if not vectors:
            raise PreconditionError("dense store needs at least one vector")
        self.similarity = similarity
        self.doc_ids = sorted(vectors)
        rows = []
        for doc_id in self.doc_ids:
            rows.append(np.asarray(list(vectors[doc_id]), dtype=np.float64))
        dims = {r.shape[0] for r in rows}
        if len(dims) != 1:
            raise PreconditionError(f"vectors have inconsistent lengths {sorted(dims)}")
        self.matrix = check_array(np.vstack(rows), dtype=np.float64)
        self.dim = self.matrix.shape[1]
        if similarity == "cosine":
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.any(norms == 0):
                bad = self.doc_ids[int(np.flatnonzero(norms == 0)[0])]
                raise PreconditionError(f"cosine similarity needs nonzero vectors; {bad!r} is zero")
            self._unit = self.matrix / norms[:, None]

    def __len__(self):
        return len(self.doc_ids)

    def scores(self, query_vec) -> np.ndarray:
        q = np.asarray(query_vec, dtype=np.float64).ravel()
        if q.shape[0] != self.dim:
            raise PreconditionError(f"query vector has length {q.shape[0]}, store dim is {self.dim}")
        if not np.all(np.isfinite(q)):
            raise PreconditionError("query vector must be finite")
        if self.similarity == "dot":
            return self.matrix @ q
        norm = np.linalg.norm(q)
        if norm == 0:
            raise PreconditionError("cosine similarity needs a nonzero query vector")
        return np.clip(self._unit @ (q / norm), -1.0, 1.0)

    @classmethod
    def from_sidecar(cls, path, similarity: str = "dot") -> "DenseVectorStore":
        return cls(read_dense_sidecar(path), similarity=similarity)


def read_dense_sidecar(path) -> dict[str, list[float]]:
    """Read ``doc_id<TAB>f1,f2,...`` lines."""
    vectors: dict[str, list[float]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            doc_id, sep, values = line.partition("\t")
            if not sep or not doc_id:
                raise ParseError("expected doc_id<TAB>f1,f2,...", path=path, line=lineno)
            try:
                vectors[doc_id] = [float(v) for v in values.split(",")]
            except ValueError:
                raise ParseError("non-numeric vector component", path=path, line=lineno) from None
    return vectors


def write_dense_sidecar(vectors: Mapping[str, Iterable[float]], path) -> Path:
    lines = [f"{d}\t{','.join(repr(float(x)) for x in v)}\n" for d, v in vectors.items()]
    return atomic_write_bytes(path, "".join(lines).encode("utf-8"))


def sidecar_dim(path) -> Optional[int]:
    """Vector length declared by the first line of a dense sidecar."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                return len(line.rstrip("\n").partition("\t")[2].split(","))
    return None


def dense_search(store: DenseVectorStore, query_vec, k: int) -> RankedList:
    """Exact top-k by the store's similarity; ties by ascending doc_id."""
    k = check_positive_int(k, "k")
    scores = store.scores(query_vec)
    return top_k(store.doc_ids, scores, np.arange(len(store.doc_ids)), k)


class ImpactVectorStore:
    """Sparse term -> weight document representations (learned-sparse style)."""

    def __init__(self, impacts: Mapping[str, Mapping[str, float]]):
        if not impacts:
            raise PreconditionError("impact store needs at least one document")
        self.doc_ids = sorted(impacts)
        vocab = sorted({t for weights in impacts.values() for t in weights})
        self.term_ids = {t: i for i, t in enumerate(vocab)}
        rows, cols, vals = [], [], []
        for i, doc_id in enumerate(self.doc_ids):
            for term, w in impacts[doc_id].items():
                w = float(w)
                if not math.isfinite(w) or w < 0:
                    raise PreconditionError(f"impact {term!r} of {doc_id!r} must be finite and >= 0")
                if w > 0:
                    rows.append(i)
                    cols.append(self.term_ids[term])
                    vals.append(w)
        self.matrix = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(len(self.doc_ids), len(vocab)), dtype=np.float64
        )

    def __len__(self):
        return len(self.doc_ids)

    def query_vector(self, query_impacts: Mapping[str, float]) -> np.ndarray:
        if not query_impacts:
            raise PreconditionError("query impacts are empty")
        vec = np.zeros(len(self.term_ids), dtype=np.float64)
        positive = False
        for term, w in query_impacts.items():
            w = float(w)
            if not math.isfinite(w) or w < 0:
                raise PreconditionError(f"query impact {term!r} must be finite and >= 0")
            positive = positive or w > 0
            tid = self.term_ids.get(term)
            if tid is not None:
                vec[tid] = w
        if not positive:
            raise PreconditionError("query impacts need at least one positive weight")
        return vec

    @classmethod
    def from_sidecar(cls, path) -> "ImpactVectorStore":
        return cls(read_impact_sidecar(path))


def read_impact_sidecar(path) -> dict[str, dict[str, float]]:
    """Read JSONL ``{"doc_id": ..., "impacts": {term: weight}}`` records."""
    impacts = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                impacts[str(record["doc_id"])] = {str(t): float(w) for t, w in record["impacts"].items()}
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError, ValueError):
                raise ParseError("expected {doc_id, impacts} record", path=path, line=lineno) from None
    return impacts


def write_impact_sidecar(impacts: Mapping[str, Mapping[str, float]], path) -> Path:
    lines = [json.dumps({"doc_id": d, "impacts": dict(w)}, ensure_ascii=False) + "\n" for d, w in impacts.items()]
    return atomic_write_bytes(path, "".join(lines).encode("utf-8"))


def impact_search(store: ImpactVectorStore, query_impacts: Mapping[str, float], k: int) -> RankedList:
    """Exact top-k of sum_t q(t) * d(t); documents without weighted overlap are dropped."""
    k = check_positive_int(k, "k")
    q = store.query_vector(query_impacts)
    scores = store.matrix @ q
    return top_k(store.doc_ids, scores, np.flatnonzero(scores > 0), k)


def tf_impacts(text: str, analyzer: Optional[Analyzer] = None) -> dict[str, float]:
    """Plain term-count weights for a text.

    A stand-in query encoder for impact stores when no learned query-side
    weights are supplied; it performs no expansion.
    """
    impacts: dict[str, float] = {}
    for tok in (analyzer or Analyzer()).tokenize(text):
        impacts[tok] = impacts.get(tok, 0.0) + 1.0
    return impacts


# embeddings


class EmbeddingProvider(Protocol):
    model: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashEmbeddingProvider:
    """Deterministic offline provider: text digest seeds a unit Gaussian vector."""

    def __init__(self, dim: int = 64, model: str = "hash-embedding"):
        self.dim = check_positive_int(dim, "dim")
        self.model = model
        self.calls = 0

    def embed(self, text: str) -> np.ndarray:
        self.calls += 1
        seed = int.from_bytes(hashlib.sha256(f"{self.model}\x00{text}".encode("utf-8")).digest()[:8], "little")
        vec = np.random.default_rng(seed).standard_normal(self.dim)
        return vec / np.linalg.norm(vec)


class OpenAIEmbeddingProvider:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(
        self,
        model: str,
        dim: int,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        max_attempts: int = 4,
        backoff: float = 0.5,
        timeout: float = 60.0,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.model = model
        self.dim = check_positive_int(dim, "dim")
        self.base_url = (base_url or os.environ.get("REFORMKIT_EMBED_BASE_URL")
                         or os.environ.get("OPENAI_BASE_URL") or "https://api.openai.com/v1")
        self.api_key = api_key or os.environ.get("REFORMKIT_EMBED_API_KEY") or os.environ.get("OPENAI_API_KEY", "")
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.calls = 0
        self._sleep = sleep
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout, transport=transport)

    def embed(self, text: str) -> np.ndarray:
        self.calls += 1
        payload = {"model": self.model, "input": text}
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last_error = None
        for attempt in range(self.max_attempts):
            try:
                response = self._client.post("/embeddings", json=payload, headers=headers)
            except httpx.TransportError as exc:
                last_error = str(exc)
            else:
                if response.status_code == 429 or response.status_code >= 500:
                    last_error = f"HTTP {response.status_code}"
                elif response.status_code >= 400:
                    raise ProtocolError(
                        f"embedding request rejected with HTTP {response.status_code}",
                        provider_message=response.text, status_code=response.status_code,
                    )
                else:
                    return self._parse(response)
            if attempt + 1 < self.max_attempts:
                self._sleep(self.backoff * 2**attempt)
        raise TransportError(f"embedding endpoint failed after {self.max_attempts} attempts: {last_error}")

    def _parse(self, response) -> np.ndarray:
        try:
            vec = np.asarray(response.json()["data"][0]["embedding"], dtype=np.float64)
        except (ValueError, KeyError, IndexError, TypeError):
            raise ProtocolError("malformed embeddings response", provider_message=response.text) from None
        if vec.shape != (self.dim,):
            raise ProtocolError(f"endpoint returned {vec.shape[0]}-dim vector, expected {self.dim}")
        return vec


class CachedEmbedder:
    """Memoizes a provider by (model, text) digest, optionally on disk.

    Cached vectors are returned bit-identically; a concurrent fill of the
    same key keeps whichever value was written last.
    """

    def __init__(self, provider, cache_dir=None):
        self.provider = provider
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._memory: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.provider.dim

    @property
    def model(self) -> str:
        return self.provider.model

    def key(self, text: str) -> str:
        return hashlib.sha256(f"{self.provider.model}\x00{text}".encode("utf-8")).hexdigest()

    def embed(self, text: str) -> np.ndarray:
        key = self.key(text)
        with self._lock:
            hit = self._memory.get(key)
        if hit is not None:
            return hit.copy()
        path = self.cache_dir / key[:2] / f"{key}.npy" if self.cache_dir else None
        if path is not None and path.exists():
            try:
                vec = np.load(path, allow_pickle=False)
                if vec.shape == (self.dim,):
                    with self._lock:
                        self._memory[key] = vec
                    return vec.copy()
            except (ValueError, OSError):
                pass
            logger.warning("discarding corrupt embedding cache entry %s", path)
        vec = np.asarray(self.provider.embed(text), dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ProtocolError(f"provider returned shape {vec.shape}, expected ({self.dim},)")
        with self._lock:
            self._memory[key] = vec
        if path is not None:
            buf = io.BytesIO()
            np.save(buf, vec, allow_pickle=False)
            atomic_write_bytes(path, buf.getvalue())
        return vec.copy()


def embed(provider, text: str) -> np.ndarray:
    """Embed one text, validating the declared dimension."""
    vec = np.asarray(provider.embed(text), dtype=np.float64)
    if vec.shape != (provider.dim,):
        raise ProtocolError(f"provider returned shape {vec.shape}, expected ({provider.dim},)")
    return vec


class DenseRetriever(BaseEstimator):
    """Dense retriever: document vectors from a sidecar or an embedder, queries via the embedder."""

    kind = "dense"

    def __init__(self, embedder=None, similarity: str = "cosine", vectors_path=None):
        self.embedder = embedder
        self.similarity = similarity
        self.vectors_path = vectors_path

    def fit(self, corpus=None, y=None):
        if self.vectors_path is not None:
            self.store_ = DenseVectorStore.from_sidecar(self.vectors_path, self.similarity)
        elif corpus is not None and self.embedder is not None:
            vectors = {doc.doc_id: embed(self.embedder, doc.contents) for doc in corpus}
            self.store_ = DenseVectorStore(vectors, self.similarity)
        else:
            raise PreconditionError("dense retriever needs a vectors sidecar or a corpus plus embedder")
        if self.embedder is not None and self.embedder.dim != self.store_.dim:
            raise PreconditionError(
                f"embedder dim {self.embedder.dim} differs from store dim {self.store_.dim}"
            )
        return self

    def search(self, text: str, k: int = 1000) -> RankedList:
        check_is_fitted(self, "store_")
        if self.embedder is None:
            raise PreconditionError("dense retriever has no embedder for query text")
        return dense_search(self.store_, embed(self.embedder, text), k)

    def predict(self, queries: Iterable[Query], k: int = 1000, run_tag: str = "dense"):
        from .evaluation import RunList

        return RunList({q.query_id: list(self.search(q.text, k)) for q in queries}, run_tag=run_tag)


class ImpactRetriever(BaseEstimator):
    """Sparse-impact retriever.

    ``query_encoder`` maps query text to term weights; by default it is a
    lookup into ``query_impacts`` (externally encoded), falling back to
    plain term counts only when ``fallback_tf`` is set.
    """

    kind = "impact"

    def __init__(self, impacts_path=None, query_impacts=None, fallback_tf: bool = False, stem: bool = False):
        self.impacts_path = impacts_path
        self.query_impacts = query_impacts
        self.fallback_tf = fallback_tf
        self.stem = stem

    def fit(self, impacts=None, y=None):
        if impacts is None:
            if self.impacts_path is None:
                raise PreconditionError("impact retriever needs an impacts sidecar or mapping")
            impacts = read_impact_sidecar(self.impacts_path)
        self.store_ = ImpactVectorStore(impacts)
        self._analyzer = Analyzer(stem=self.stem)
        return self

    def encode(self, text: str) -> dict[str, float]:
        if self.query_impacts and text in self.query_impacts:
            return dict(self.query_impacts[text])
        if self.fallback_tf:
            return tf_impacts(text, self._analyzer)
        raise PreconditionError(f"no query-side impacts supplied for {text[:60]!r}")

    def search(self, text: str, k: int = 1000) -> RankedList:
        check_is_fitted(self, "store_")
        return impact_search(self.store_, self.encode(text), k)

    def predict(self, queries: Iterable[Query], k: int = 1000, run_tag: str = "impact"):
        from .evaluation import RunList

        return RunList({q.query_id: list(self.search(q.text, k)) for q in queries}, run_tag=run_tag)


def read_query_impacts(path) -> dict[str, dict[str, float]]:
    """Read JSONL ``{"text": ..., "impacts": {...}}`` records keyed by query text."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                out[record["text"]] = {str(t): float(w) for t, w in record["impacts"].items()}
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError, ValueError):
                raise ParseError("expected {text, impacts} record", path=path, line=lineno) from None
    return out

"""Document collections, query sets and the text analyzer."""
from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import regex

from .exceptions import ConflictError, ParseError, PreconditionError
from .utils import atomic_write_bytes, atomic_write_text

# Lucene's classic English stop set. Only used when stopword removal is requested.
ENGLISH_STOPWORDS = frozenset(
    "a an and are as at be but by for if in into is it no not of on or such "
    "that the their then there these they this to was will with".split()
)

# UAX #29 word boundaries; a segment is a token when it holds a letter or digit.
_BOUNDARY = regex.compile(r"(?w)\b", regex.V1)
_WORDLIKE = regex.compile(r"[\p{L}\p{N}]")
# A quote can only be word-internal, so one opening a segment is a regex artifact.
# Marks and format characters (WB4) ride along with the character they follow.
_LEADING = regex.compile(r"^(?:[ '\u2019][\p{M}\p{Cf}]*)+")

STORE_FORMAT = "reformkit-corpus"
STORE_VERSION = 1


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    title: Optional[str] = None

    @property
    def contents(self) -> str:
        """Text fed to the analyzer: title and body."""
        if self.title:
            return f"{self.title} {self.text}"
        return self.text


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str


class Analyzer:
    """Lowercasing Unicode word tokenizer with optional stopwords and stemming.

    Text is NFC-normalized, lowercased and split at Unicode (UAX #29) word
    boundaries; segments without a letter or digit are dropped. So "3.5" and
    "don't" stay whole while "état-major" splits in two. ``stopwords`` is an
    iterable of words or the name ``"english"``.
    """

    version = 1

    def __init__(self, stem: bool = False, stopwords: Optional[Iterable[str]] = None):
        self.stem = stem
        if isinstance(stopwords, str):
            if stopwords != "english":
                raise PreconditionError(f"unknown stopword list {stopwords!r}")
            stopwords = ENGLISH_STOPWORDS
        self.stopwords = frozenset(w.lower() for w in stopwords) if stopwords else frozenset()
        self._stemmer = None
        if stem:
            import snowballstemmer

            self._stemmer = snowballstemmer.stemmer("porter")

    def __call__(self, text: str) -> list[str]:
        return self.tokenize(text)

    def tokenize(self, text: str) -> list[str]:
        if not text:
            return []
        text = unicodedata.normalize("NFC", text).lower()
        # The leading space sidesteps a start-of-text boundary quirk in regex.
        segments = (_LEADING.sub("", seg) for seg in _BOUNDARY.split(" " + text))
        tokens = [seg for seg in segments if _WORDLIKE.search(seg)]
        if self.stopwords:
            tokens = [t for t in tokens if t not in self.stopwords]
        if self._stemmer is not None:
            tokens = self._stemmer.stemWords(tokens)
        return tokens

    def get_config(self) -> dict:
        return {
            "version": self.version,
            "stem": self.stem,
            "stopwords": sorted(self.stopwords),
        }

    @classmethod
    def from_config(cls, config: dict) -> "Analyzer":
        return cls(stem=config.get("stem", False), stopwords=config.get("stopwords") or None)

    def __repr__(self):
        return f"Analyzer(stem={self.stem}, stopwords={len(self.stopwords)})"


_DEFAULT_ANALYZER = Analyzer()


def tokenize(text: str) -> list[str]:
    """Tokenize with the default analyzer (lowercase, no stemming, no stopwords)."""
    return _DEFAULT_ANALYZER.tokenize(text)


class CorpusHandle:
    """Immutable, ordered view over an ingested document collection."""

    def __init__(self, documents: Iterable[Document]):
        self._docs: tuple[Document, ...] = tuple(documents)
        self._positions: dict[str, int] = {}
        for i, doc in enumerate(self._docs):
            if doc.doc_id in self._positions:
                raise ConflictError(f"duplicate doc_id {doc.doc_id!r}")
            self._positions[doc.doc_id] = i

    @property
    def count(self) -> int:
        return len(self._docs)

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __getitem__(self, doc_id: str) -> Document:
        return self._docs[self._positions[doc_id]]

    def __contains__(self, doc_id) -> bool:
        return doc_id in self._positions

    @property
    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self._docs]

    def save(self, directory) -> Path:
        """Persist as an append-only record log plus an id -> byte offset table."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        offsets = {}
        chunks = []
        position = 0
        for doc in self._docs:
            record = {"doc_id": doc.doc_id, "text": doc.text}
            if doc.title is not None:
                record["title"] = doc.title
            line = (json.dumps(record, ensure_ascii=False) + "\n").encode("utf-8")
            offsets[doc.doc_id] = position
            position += len(line)
            chunks.append(line)
        atomic_write_bytes(directory / "records.jsonl", b"".join(chunks))
        atomic_write_text(directory / "offsets.json", json.dumps(offsets, ensure_ascii=False))
        atomic_write_text(
            directory / "meta.json",
            json.dumps({"format": STORE_FORMAT, "version": STORE_VERSION, "count": len(self)}),
        )
        return directory

    @classmethod
    def load(cls, directory) -> "CorpusHandle":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        if meta.get("format") != STORE_FORMAT or meta.get("version") != STORE_VERSION:
            raise ParseError(f"unsupported corpus store {meta!r}", path=directory)
        offsets = json.loads((directory / "offsets.json").read_text(encoding="utf-8"))
        handle = ingest_corpus(directory / "records.jsonl", "jsonl")
        log = (directory / "records.jsonl").read_bytes()
        for doc_id, offset in offsets.items():
            record = json.loads(log[offset : log.index(b"\n", offset)])
            if record["doc_id"] != doc_id:
                raise ParseError(f"offset table mismatch for {doc_id!r}", path=directory)
        if len(offsets) != len(handle):
            raise ParseError("offset table size differs from record log", path=directory)
        return handle

    def __repr__(self):
        return f"CorpusHandle(count={self.count})"


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line


def ingest_corpus(path, format: str = "jsonl") -> CorpusHandle:
    """Read a JSONL or TSV collection in file order.

    Raises ParseError (with line number) on malformed records and
    ConflictError when a doc_id repeats.
    """
    path = Path(path)
    if not path.exists():
        raise PreconditionError(f"corpus file not found: {path}")
    if format not in ("jsonl", "tsv"):
        raise PreconditionError(f"unknown corpus format {format!r}")
    docs = []
    seen: dict[str, int] = {}
    for lineno, line in _read_lines(path):
        if format == "jsonl":
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path=path, line=lineno) from None
            if not isinstance(record, dict):
                raise ParseError("record is not an object", path=path, line=lineno)
            doc_id, text, title = record.get("doc_id"), record.get("text"), record.get("title")
            if title is not None and not isinstance(title, str):
                raise ParseError("title must be a string", path=path, line=lineno)
        else:
            if "\t" not in line:
                raise ParseError("expected doc_id<TAB>text", path=path, line=lineno)
            doc_id, text = line.split("\t", 1)
            title = None
        if not isinstance(doc_id, str) or not doc_id:
            raise ParseError("missing or empty doc_id", path=path, line=lineno)
        if not isinstance(text, str):
            raise ParseError("missing text field", path=path, line=lineno)
        if doc_id in seen:
            raise ConflictError(
                f"duplicate doc_id {doc_id!r} at lines {seen[doc_id]} and {lineno} of {path}"
            )
        seen[doc_id] = lineno
        docs.append(Document(doc_id, text, title))
    return CorpusHandle(docs)


def load_queries(path) -> list[Query]:
    """Read ``query_id<TAB>text`` lines (or JSONL with query_id/text)."""
    path = Path(path)
    if not path.exists():
        raise PreconditionError(f"query file not found: {path}")
    queries = []
    seen: dict[str, int] = {}
    is_jsonl = path.suffix == ".jsonl"
    for lineno, line in _read_lines(path):
        if is_jsonl:
            try:
                record = json.loads(line)
                qid, text = record["query_id"], record["text"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise ParseError("expected {query_id, text} object", path=path, line=lineno) from None
        else:
            if "\t" not in line:
                raise ParseError("expected query_id<TAB>text", path=path, line=lineno)
            qid, text = line.split("\t", 1)
        if not qid or not isinstance(text, str) or not text.strip():
            raise ParseError("empty query id or text", path=path, line=lineno)
        if qid in seen:
            raise ConflictError(f"duplicate query_id {qid!r} at lines {seen[qid]} and {lineno} of {path}")
        seen[qid] = lineno
        queries.append(Query(qid, text))
    return queries


def write_queries(queries: Iterable[Query], path) -> Path:
    lines = [f"{q.query_id}\t{q.text}\n" for q in queries]
    return atomic_write_text(path, "".join(lines))

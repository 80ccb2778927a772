"""LLM-based query reformulation methods and query assembly."""
from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import yaml
from sklearn.base import BaseEstimator, TransformerMixin

from .corpus import Query, tokenize
from .exceptions import ParseError, PreconditionError, ReformulationError
from .llm import DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURES, ChatRequest, DecodingConfig, Message
from .utils import atomic_write_text

logger = logging.getLogger(__name__)

METHODS = (
    "original", "rm3", "genqr", "genqr_ensemble", "q2k",
    "q2d_zs", "q2d_fs", "q2d_cot", "qa_expand", "mugi", "lamer", "csqe",
)
LLM_METHODS = tuple(m for m in METHODS if m not in ("original", "rm3"))
GROUNDED_METHODS = ("lamer", "csqe", "rm3")
PART_KINDS = ("keyword_set", "pseudo_doc", "answer", "rewrite", "extracted_sentence")

TEMPLATE_VERSION = "v1"

GENQR_CALLS = 5
MUGI_CALLS = 5
LAMER_CALLS = 5
CSQE_PASSAGES = 2
QA_SUBQUESTIONS = 3
RETRIEVAL_DEPTH = 10
CSQE_COLLECTION_TERMS = 50
Q2D_REPETITIONS = 5
MUGI_LAMBDA = 5.0
MUGI_MAX_REPETITIONS = 30


@dataclass(frozen=True)
class AssemblySpec:
    query_repetitions: int = 1
    part_separator: str = " "
    dedup_keywords: bool = False

    def __post_init__(self):
        if isinstance(self.query_repetitions, bool) or int(self.query_repetitions) != self.query_repetitions \
                or self.query_repetitions < 1:
            raise PreconditionError(f"query_repetitions must be >= 1, got {self.query_repetitions!r}")


_KEYWORD_SPLIT = re.compile(r"[\n,;]+")
_LIST_PREFIX = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.)]|\d+\s*[-:])\s*")
_LABEL = re.compile(r"^\s*(?:keywords?|terms?|expansion terms?)\s*:\s*", re.IGNORECASE)
_HAS_WORD = re.compile(r"[^\W_]")


def parse_keywords(text: str) -> list[str]:
    """Split LLM keyword output on newlines, commas and semicolons."""
    text = _LABEL.sub("", text.strip())
    out = []
    for raw in _KEYWORD_SPLIT.split(text):
        kw = _LIST_PREFIX.sub("", raw).strip().strip("\"'`").strip()
        if kw and _HAS_WORD.search(kw):
            out.append(" ".join(kw.split()))
    return out


def parse_passage(text: str) -> str:
    """Passage outputs are taken verbatim, after a trailing ``Passage:`` marker if present."""
    marker = re.findall(r"passage\s*:", text, flags=re.IGNORECASE)
    if marker:
        text = re.split(r"passage\s*:", text, flags=re.IGNORECASE)[-1]
    return " ".join(text.split())


def parse_lines(text: str) -> list[str]:
    lines = []
    for raw in text.splitlines():
        line = _LIST_PREFIX.sub("", raw).strip()
        if line and _HAS_WORD.search(line):
            lines.append(line)
    return lines


_INDEX_LINE = re.compile(r"^\s*(?:answer\s*)?[\[(]?(\d+)[\])]?\s*(?:[:.)\-]\s*(.*))?$", re.IGNORECASE)


def parse_indices(text: str, n: int) -> list[tuple[int, Optional[str]]]:
    """Lines like ``2`` or ``2: rewritten text``; returns 1-based indices in order."""
    out, seen = [], set()
    for raw in text.splitlines():
        m = _INDEX_LINE.match(raw)
        if not m:
            continue
        idx = int(m.group(1))
        if 1 <= idx <= n and idx not in seen:
            seen.add(idx)
            rewrite = (m.group(2) or "").strip()
            out.append((idx, rewrite or None))
    return out


def _keyword_region(parts, dedup: bool) -> Iterable[tuple[str, str]]:
    seen = set()
    for kind, text in parts:
        if kind != "keyword_set":
            yield kind, text
            continue
        kws = parse_keywords(text)
        if dedup:
            fresh = []
            for kw in kws:
                key = kw.casefold()
                if key not in seen:
                    seen.add(key)
                    fresh.append(kw)
            kws = fresh
        yield kind, " ".join(kws)


def assemble(original: str, parts: Sequence[tuple[str, str]], spec: AssemblySpec) -> str:
    """Original query repeated, then the parts in order, joined by the separator.

    Keyword parts are flattened to space-separated keywords; with
    ``dedup_keywords`` a keyword already emitted by an earlier part is
    dropped (case-insensitively). Empty parts are skipped.
    """
    pieces = [original] * spec.query_repetitions
    for _, text in _keyword_region(parts, spec.dedup_keywords):
        if text:
            pieces.append(text)
    return spec.part_separator.join(pieces)


@dataclass(frozen=True)
class ReformulatedQuery:
    query_id: str
    method: str
    original_text: str
    parts: tuple[tuple[str, str], ...] = ()
    assembly: AssemblySpec = field(default_factory=AssemblySpec)
    final_text: str = ""
    provenance: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()
    weights: Optional[dict] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise PreconditionError(f"unknown method {self.method!r}")
        parts = tuple((str(k), str(t)) for k, t in self.parts)
        for kind, _ in parts:
            if kind not in PART_KINDS:
                raise PreconditionError(f"unknown part kind {kind!r}")
        object.__setattr__(self, "parts", parts)
        object.__setattr__(self, "provenance", tuple(self.provenance))
        object.__setattr__(self, "flags", tuple(self.flags))
        if not self.final_text:
            object.__setattr__(self, "final_text", self.render())

    def render(self, query_repetitions: Optional[int] = None) -> str:
        spec = self.assembly
        if query_repetitions is not None:
            spec = replace(spec, query_repetitions=query_repetitions)
        return assemble(self.original_text, self.parts, spec)

    def text_for(self, retriever_kind: str) -> str:
        """Query text for a retriever; neural encoders get a single copy of the query."""
        if retriever_kind == "lexical":
            return self.final_text
        return self.render(query_repetitions=1)

    @property
    def degenerate(self) -> bool:
        return "degenerate" in self.flags

    def to_dict(self) -> dict:
        out = {
            "query_id": self.query_id,
            "method": self.method,
            "original_text": self.original_text,
            "parts": [{"kind": k, "text": t} for k, t in self.parts],
            "assembly": {
                "query_repetitions": self.assembly.query_repetitions,
                "part_separator": self.assembly.part_separator,
                "dedup_keywords": self.assembly.dedup_keywords,
            },
            "final_text": self.final_text,
            "provenance": list(self.provenance),
            "flags": list(self.flags),
        }
        if self.weights is not None:
            out["weights"] = dict(self.weights)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ReformulatedQuery":
        rq = cls(
            query_id=data["query_id"],
            method=data["method"],
            original_text=data["original_text"],
            parts=tuple((p["kind"], p["text"]) for p in data["parts"]),
            assembly=AssemblySpec(**data["assembly"]),
            final_text=data["final_text"],
            provenance=tuple(data.get("provenance", ())),
            flags=tuple(data.get("flags", ())),
            weights=data.get("weights"),
        )
        if rq.render() != rq.final_text:
            raise ParseError(f"final_text of {rq.query_id}/{rq.method} does not match its parts")
        return rq


def write_reformulations(rqs: Iterable[ReformulatedQuery], path) -> Path:
    lines = [json.dumps(rq.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for rq in rqs]
    return atomic_write_text(path, "".join(lines))


def read_reformulations(path) -> list[ReformulatedQuery]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(ReformulatedQuery.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad reformulation record ({exc})", path=path, line=lineno) from None
    return out


@lru_cache(maxsize=None)
def load_template(method: str, version: str = TEMPLATE_VERSION) -> dict:
    try:
        text = resources.files("reformkit").joinpath("templates", version, f"{method}.yaml").read_text("utf-8")
    except FileNotFoundError:
        raise PreconditionError(f"no prompt template for {method!r} in version {version!r}") from None
    return yaml.safe_load(text)


@dataclass
class MethodContext:
    """Everything a method needs besides the query itself."""

    gateway: object = None
    retriever: object = None
    model: str = "mock"
    seed: Optional[int] = None
    temperature: Optional[float] = None
    max_tokens: int = DEFAULT_MAX_TOKENS
    params: dict = field(default_factory=dict)
    template_version: str = TEMPLATE_VERSION

    def param(self, name, default):
        return self.params.get(name, default)

    def decoding(self, method: str) -> DecodingConfig:
        temperature = self.temperature if self.temperature is not None else DEFAULT_TEMPERATURES.get(method, 1.0)
        return DecodingConfig(model=self.model, temperature=temperature, max_tokens=self.max_tokens, seed=self.seed)

    def call(self, method: str, prompt: dict, tag: str, sample_index: int = 0, **values):
        if self.gateway is None:
            raise PreconditionError(f"{method} needs an LLM gateway")
        messages = []
        if prompt.get("system"):
            messages.append(Message("system", prompt["system"]))
        messages.append(Message("user", prompt["user"].format(**values)))
        request = ChatRequest(tuple(messages), self.decoding(method), tag=tag, sample_index=sample_index)
        return self.gateway.cached_complete(request)

    def require_retriever(self, method: str):
        if self.retriever is None:
            raise PreconditionError(f"{method} is corpus-grounded and needs a retriever")
        return self.retriever


def _result(query, method, parts, assembly, keys, flags=(), weights=None) -> ReformulatedQuery:
    return ReformulatedQuery(
        query_id=query.query_id,
        method=method,
        original_text=query.text,
        parts=tuple(parts),
        assembly=assembly,
        provenance=tuple(keys),
        flags=tuple(flags),
        weights=weights,
    )


def _degenerate(query, method, keys, extra=()) -> ReformulatedQuery:
    logger.warning("%s produced no usable content for query %s", method, query.query_id)
    return _result(query, method, (), AssemblySpec(), keys, flags=("degenerate",) + tuple(extra))


def original(query: Query, ctx: Optional[MethodContext] = None) -> ReformulatedQuery:
    return _result(query, "original", (), AssemblySpec(), ())


def rm3(query: Query, ctx: MethodContext) -> ReformulatedQuery:
    """Classical RM3 baseline; the term weights travel with the record."""
    retriever = ctx.require_retriever("rm3")
    wq = retriever.rm3(query.text)
    flags = tuple(wq.flags)
    query_terms = set(retriever.analyze(query.text))
    expansion = [t for t, _ in sorted(wq.terms.items(), key=lambda kv: (-kv[1], kv[0])) if t not in query_terms]
    parts = [("keyword_set", ", ".join(expansion))] if expansion else []
    return _result(query, "rm3", parts, AssemblySpec(), (), flags=flags, weights=dict(wq.terms))


def _keyword_method(query, ctx, method, prompts) -> ReformulatedQuery:
    """Shared body of the keyword-level methods: one keyword set per call."""
    keys, parts = [], []
    empty = unparseable = 0
    for i, (prompt, values) in enumerate(prompts):
        completion = ctx.call(method, prompt, "keywords", sample_index=values.pop("_sample", 0), **values)
        keys.append(completion.key)
        if not completion.text.strip():
            empty += 1
            continue
        kws = parse_keywords(completion.text)
        if not kws:
            unparseable += 1
            logger.warning("%s call %d for query %s unparseable; dropped", method, i, query.query_id)
            continue
        parts.append(("keyword_set", ", ".join(kws)))
    dedup = bool(ctx.param("dedup_keywords", method == "genqr_ensemble"))
    if not parts:
        if unparseable and not empty:
            raise ReformulationError(f"{method}: all {unparseable} completions unparseable for {query.query_id}")
        return _degenerate(query, method, keys)
    flags = ("partial",) if (empty or unparseable) else ()
    return _result(query, method, parts, AssemblySpec(1, " ", dedup), keys, flags)


def genqr(query: Query, ctx: MethodContext) -> ReformulatedQuery:
    """Five independent keyword generations appended to the query."""
    tpl = load_template("genqr", ctx.template_version)
    n = int(ctx.param("num_calls", GENQR_CALLS))
    return _keyword_method(query, ctx, "genqr", [(tpl, {"query": query.text, "_sample": i}) for i in range(n)])


def genqr_ensemble(query: Query, ctx: MethodContext) -> ReformulatedQuery:
    """One keyword generation per instruction paraphrase, merged."""
    tpl = load_template("genqr_ensemble", ctx.template_version)
    instructions = tpl["instructions"]
    if len(instructions) != 10:
        raise PreconditionError(f"genqr_ensemble needs 10 instructions, template has {len(instructions)}")
    prompts = [(tpl, {"query": query.text, "instruction": ins}) for ins in instructions]
    return _keyword_method(query, ctx, "genqr_ensemble", prompts)


def q2k(query: Query, ctx: MethodContext) -> ReformulatedQuery:
    tpl = load_template("q2k", ctx.template_version)
    return _keyword_method(query, ctx, "q2k", [(tpl, {"query": query.text})])


def _fs_examples(tpl) -> str:
    return "\n\n".join(tpl["example"].format(**ex) for ex in tpl["examples"])


def q2d(query: Query, variant: str, ctx: MethodContext) -> ReformulatedQuery:
    """Single pseudo-document; the query is repeated to keep its weight under BM25."""
    if variant not in ("zs", "fs", "cot"):
        raise PreconditionError(f"unknown q2d variant {variant!r}")
    method = f"q2d_{variant}"
    tpl = load_template(method, ctx.template_version)
    values = {"query": query.text}
    if variant == "fs":
        values["examples"] = _fs_examples(tpl)
    completion = ctx.call(method, tpl, "passage", **values)
    doc = parse_passage(completion.text)
    if not doc:
        return _degenerate(query, method, [completion.key])
    reps = int(ctx.param("query_repetitions", Q2D_REPETITIONS))
    return _result(query, method, [("pseudo_doc", doc)], AssemblySpec(reps, " "), [completion.key])


def q2d_zs(query, ctx):
    return q2d(query, "zs", ctx)


def q2d_fs(query, ctx):
    return q2d(query, "fs", ctx)


def q2d_cot(query, ctx):
    return q2d(query, "cot", ctx)


def qa_expand(query: Query, ctx: MethodContext) -> ReformulatedQuery:
    """Sub-questions, one answer each, then one batched rewrite-and-filter call."""
    tpl = load_template("qa_expand", ctx.template_version)
    keys = []
    first = ctx.call("qa_expand", tpl["questions"], "questions", query=query.text)
    keys.append(first.key)
    questions = parse_lines(first.text)[:QA_SUBQUESTIONS]
    flags = []
    if not questions:
        questions = [query.text]
        flags.append("no_subquestions")

    answers = []
    for i, question in enumerate(questions):
        c = ctx.call("qa_expand", tpl["answer"], "passage", sample_index=i, query=query.text, question=question)
        keys.append(c.key)
        answers.append(parse_passage(c.text))
    nonempty = [(i + 1, a) for i, a in enumerate(answers) if a]
    if not nonempty:
        return _degenerate(query, "qa_expand", keys, tuple(flags))

    listing = "\n".join(f"Answer {i}: {a}" for i, a in nonempty)
    judged = ctx.call("qa_expand", tpl["filter"], "filter", query=query.text, answers=listing)
    keys.append(judged.key)
    by_index = dict(nonempty)
    kept = [(i, rw or by_index[i]) for i, rw in parse_indices(judged.text, len(answers)) if i in by_index]
    if not kept:
        logger.warning("qa_expand filter kept nothing for %s; using all answers", query.query_id)
        kept = nonempty
        flags.append("filter_fallback")
    parts = [("answer", text) for _, text in kept]
    return _result(query, "qa_expand", parts, AssemblySpec(), keys, flags)


def mugi_repetitions(query_tokens: int, expansion_tokens: int, lam: float = MUGI_LAMBDA,
                     max_repetitions: int = MUGI_MAX_REPETITIONS) -> int:
    """clamp(round(expansion_tokens / (lam * query_tokens)), 1, max_repetitions), half rounding up."""
    ratio = expansion_tokens / (lam * max(query_tokens, 1))
    return int(min(max(math.floor(ratio + 0.5), 1), max_repetitions))


def mugi(query: Query, ctx: MethodContext) -> ReformulatedQuery:
    """Five pseudo-documents; query repetitions scale with their total length."""
    tpl = load_template("mugi", ctx.template_version)
    keys, docs = [], []
    for i in range(int(ctx.param("num_calls", MUGI_CALLS))):
        c = ctx.call("mugi", tpl, "passage", sample_index=i, query=query.text)
        keys.append(c.key)
        doc = parse_passage(c.text)
        if doc:
            docs.append(doc)
    if not docs:
        return _degenerate(query, "mugi", keys)
    reps = mugi_repetitions(
        len(tokenize(query.text)),
        sum(len(tokenize(d)) for d in docs),
        float(ctx.param("mugi_lambda", MUGI_LAMBDA)),
        int(ctx.param("max_repetitions", MUGI_MAX_REPETITIONS)),
    )
    return _result(query, "mugi", [("pseudo_doc", d) for d in docs], AssemblySpec(reps, " "), keys)


def _truncate_words(text: str, n: int) -> str:
    words = text.split()
    return " ".join(words[:n])


def lamer(query: Query, ctx: MethodContext) -> ReformulatedQuery:
    """Rewrites conditioned on the top retrieved passages for the original query."""
    retriever = ctx.require_retriever("lamer")
    tpl = load_template("lamer", ctx.template_version)
    depth = int(ctx.param("retrieval_depth", RETRIEVAL_DEPTH))
    max_words = int(ctx.param("passage_max_words", 128))
    hits = retriever.search(query.text, depth)
    flags = []
    if len(hits):
        passages = "\n".join(
            tpl["passage"].format(rank=r, text=_truncate_words(retriever.document(d).contents, max_words))
            for r, (d, _) in enumerate(hits, start=1)
        )
    else:
        passages = tpl["no_evidence"]
        flags.append("evidence_free")
    keys, rewrites = [], []
    for i in range(int(ctx.param("num_calls", LAMER_CALLS))):
        c = ctx.call("lamer", tpl, "passage", sample_index=i, query=query.text, passages=passages)
        keys.append(c.key)
        text = parse_passage(c.text)
        if text:
            rewrites.append(text)
    if not rewrites:
        return _degenerate(query, "lamer", keys, tuple(flags))
    return _result(query, "lamer", [("rewrite", r) for r in rewrites], AssemblySpec(), keys, flags)


_SENTENCE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE.split(" ".join(text.split())) if s.strip()]


def parse_judgment(text: str, document: str) -> Optional[list[str]]:
    """Relevant sentences from a judgment; None when the output is unusable.

    Accepts sentences copied from the document, or 1-based sentence indices.
    ``NONE`` yields an empty list.
    """
    stripped = text.strip()
    if not stripped:
        return None
    if stripped.strip(".").upper() == "NONE":
        return []
    sentences = split_sentences(document)
    norm_doc = " ".join(document.split()).casefold()
    out = []
    for raw in stripped.splitlines():
        line = " ".join(_LIST_PREFIX.sub("", raw).strip().strip("\"'").split())
        if not line:
            continue
        if line.isdigit():
            idx = int(line)
            if 1 <= idx <= len(sentences):
                out.append(sentences[idx - 1])
            continue
        if line.casefold() in norm_doc:
            out.append(line)
    return out or None


def csqe(query: Query, ctx: MethodContext) -> ReformulatedQuery:
    """Corpus-steered passages plus sentences judged relevant in the top documents.

    The collection signal is the list of highest document-frequency terms.
    One judgment call is issued per retrieved document.
    """
    retriever = ctx.require_retriever("csqe")
    tpl = load_template("csqe", ctx.template_version)
    n_terms = int(ctx.param("collection_terms", CSQE_COLLECTION_TERMS))
    collection_terms = ", ".join(retriever.top_terms_by_df(n_terms))
    keys, parts, flags = [], [], []
    for i in range(int(ctx.param("num_passages", CSQE_PASSAGES))):
        c = ctx.call("csqe", tpl["generate"], "passage", sample_index=i,
                     query=query.text, collection_terms=collection_terms)
        keys.append(c.key)
        passage = parse_passage(c.text)
        if passage:
            parts.append(("pseudo_doc", passage))

    hits = retriever.search(query.text, int(ctx.param("retrieval_depth", RETRIEVAL_DEPTH)))
    if not len(hits):
        flags.append("evidence_free")
    for doc_id, _ in hits:
        document = retriever.document(doc_id).contents
        c = ctx.call("csqe", tpl["judge"], "judge", query=query.text, document=document)
        keys.append(c.key)
        sentences = parse_judgment(c.text, document)
        if sentences is None:
            logger.warning("csqe judgment for %s/%s unparseable; skipped", query.query_id, doc_id)
            continue
        parts.extend(("extracted_sentence", s) for s in sentences)
    if not parts:
        return _degenerate(query, "csqe", keys, tuple(flags))
    return _result(query, "csqe", parts, AssemblySpec(), keys, flags)


METHOD_FUNCTIONS: dict[str, Callable[[Query, MethodContext], ReformulatedQuery]] = {
    "original": original,
    "rm3": rm3,
    "genqr": genqr,
    "genqr_ensemble": genqr_ensemble,
    "q2k": q2k,
    "q2d_zs": q2d_zs,
    "q2d_fs": q2d_fs,
    "q2d_cot": q2d_cot,
    "qa_expand": qa_expand,
    "mugi": mugi,
    "lamer": lamer,
    "csqe": csqe,
}


class QueryReformulator(BaseEstimator, TransformerMixin):
    """Transformer turning queries into ReformulatedQuery records.

    ``fit`` only attaches a retriever (needed by lamer, csqe and rm3);
    ``transform`` runs the method over every query, concurrently when
    ``n_jobs > 1``, and returns results in input order.
    """

    def __init__(
        self,
        method: str = "original",
        gateway=None,
        model: str = "mock",
        seed: Optional[int] = None,
        temperature: Optional[float] = None,
        max_tokens: int = DEFAULT_MAX_TOKENS,
        method_params: Optional[dict] = None,
        n_jobs: int = 1,
    ):
        self.method = method
        self.gateway = gateway
        self.model = model
        self.seed = seed
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.method_params = method_params
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None, retriever=None):
        if self.method not in METHOD_FUNCTIONS:
            raise PreconditionError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.method in GROUNDED_METHODS and retriever is None:
            raise PreconditionError(f"{self.method} needs a retriever at fit time")
        self.retriever_ = retriever
        self.context_ = MethodContext(
            gateway=self.gateway,
            retriever=retriever,
            model=self.model,
            seed=self.seed,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            params=dict(self.method_params or {}),
        )
        return self

    def transform(self, X: Iterable[Query]) -> list[ReformulatedQuery]:
        if not hasattr(self, "context_"):
            self.fit()
        fn = METHOD_FUNCTIONS[self.method]
        queries = list(X)
        if self.n_jobs > 1 and len(queries) > 1:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                return list(pool.map(lambda q: fn(q, self.context_), queries))
        return [fn(q, self.context_) for q in queries]

    def fit_transform(self, X, y=None, retriever=None):
        return self.fit(X, y, retriever=retriever).transform(X)

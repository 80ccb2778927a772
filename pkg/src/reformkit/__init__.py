"""Reproducible LLM query reformulation experiments over lexical and vector retrieval."""

__version__ = "0.1.0"

from .corpus import Analyzer, CorpusHandle, Document, Query, ingest_corpus, load_queries  # noqa: E402
from .evaluation import EvalReport, Qrels, RunList, evaluate, parse_qrels, parse_run, write_run  # noqa: E402
from .lexical import BM25Retriever, InvertedIndex, WeightedQuery, build_index  # noqa: E402
from .llm import ChatRequest, DecodingConfig, LLMGateway, MockProvider, OpenAIChatProvider  # noqa: E402
from .reformulate import METHODS, QueryReformulator, ReformulatedQuery  # noqa: E402
from .vector import DenseRetriever, DenseVectorStore, ImpactRetriever, ImpactVectorStore  # noqa: E402

__all__ = [
    "__version__",
    "Analyzer", "CorpusHandle", "Document", "Query", "ingest_corpus", "load_queries",
    "EvalReport", "Qrels", "RunList", "evaluate", "parse_qrels", "parse_run", "write_run",
    "BM25Retriever", "InvertedIndex", "WeightedQuery", "build_index",
    "ChatRequest", "DecodingConfig", "LLMGateway", "MockProvider", "OpenAIChatProvider",
    "METHODS", "QueryReformulator", "ReformulatedQuery",
    "DenseRetriever", "DenseVectorStore", "ImpactRetriever", "ImpactVectorStore",
]

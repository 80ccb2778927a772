import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reformkit.corpus import CorpusHandle, Document  # noqa: E402


def write_jsonl_corpus(path: Path, docs: dict[str, str]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, text in docs.items():
            fh.write(json.dumps({"doc_id": doc_id, "text": text}) + "\n")
    return path


def make_corpus(docs: dict[str, str]) -> CorpusHandle:
    return CorpusHandle([Document(d, t) for d, t in docs.items()])


@pytest.fixture
def toy_docs():
    return {"d1": "a b", "d2": "b c", "d3": "c c d", "d4": "a d e e"}


def build_experiment(root: Path, n_queries: int = 10, n_docs: int = 60, seed: int = 0,
                     methods=("original", "q2d_zs"), retrievers=("bm25", "dense")) -> Path:
    """Small synthetic dataset plus a config file; returns the config path."""
    import random

    import yaml

    from reformkit.llm import _VOCAB
    from reformkit.vector import HashEmbeddingProvider, write_dense_sidecar, write_impact_sidecar

    rng = random.Random(seed)
    # some mock-LLM vocabulary so expansions can actually move the rankings
    words = [f"w{i}" for i in range(80)] + list(_VOCAB[::5])
    docs = {f"doc{i:03d}": " ".join(rng.choices(words, k=rng.randint(6, 20))) for i in range(n_docs)}
    data = root / "data"
    data.mkdir(parents=True, exist_ok=True)
    write_jsonl_corpus(data / "corpus.jsonl", docs)
    doc_ids = list(docs)
    with open(data / "queries.tsv", "w", encoding="utf-8") as qf, open(data / "qrels.txt", "w") as rf:
        for q in range(n_queries):
            target = doc_ids[q * 3 % n_docs]
            qf.write(f"q{q:02d}\t{' '.join(docs[target].split()[:3])}\n")
            rf.write(f"q{q:02d} 0 {target} 2\n")
            rf.write(f"q{q:02d} 0 {doc_ids[(q * 3 + 1) % n_docs]} 1\n")
    embed = HashEmbeddingProvider(dim=16)
    write_dense_sidecar({d: embed.embed(t).tolist() for d, t in docs.items()}, data / "vectors.tsv")
    write_impact_sidecar({d: {w: float(t.split().count(w)) for w in set(t.split())} for d, t in docs.items()},
                         data / "impacts.jsonl")
    specs = {
        "bm25": {"name": "bm25", "kind": "lexical", "k1": 0.9, "b": 0.4, "depth": 100},
        "dense": {"name": "dense", "kind": "dense", "similarity": "cosine", "depth": 100,
                  "vectors": {"toy": "data/vectors.tsv"}, "embedding": {"provider": "hash", "dim": 16}},
        "impact": {"name": "impact", "kind": "impact", "depth": 100, "impacts": {"toy": "data/impacts.jsonl"},
                   "fallback_tf": True},
        "impact_strict": {"name": "impact_strict", "kind": "impact", "impacts": {"toy": "data/impacts.jsonl"}},
    }
    config = {
        "output_root": "out",
        "datasets": [{"name": "toy", "corpus": "data/corpus.jsonl", "queries": "data/queries.tsv",
                      "qrels": "data/qrels.txt"}],
        "retrievers": [specs[r] for r in retrievers],
        "methods": list(methods),
        "llms": [{"name": "mock-a", "provider": "mock", "model": "mock", "seed": 1}],
        "metrics": [{"name": "ndcg", "k": 10}, {"name": "recall", "k": 100}],
    }
    path = root / "experiment.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path

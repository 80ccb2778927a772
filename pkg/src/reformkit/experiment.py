"""Declarative experiment grids: reformulate once, retrieve many, evaluate, export."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .analytics import (
    ScoreGrid,
    delta_distribution,
    rank_cv_table,
    spearman_table,
    variance_table,
    write_delta_csv,
    write_rank_cv_csv,
    write_spearman_csv,
    write_variance_json,
)
from .corpus import ingest_corpus, load_queries, tokenize
from .evaluation import RunList, evaluate, parse_qrels, parse_run, read_report_csv, write_run
from .exceptions import ConfigError, ConflictError, ReformkitError
from .lexical import BM25Retriever, WeightedQuery
from .llm import LLMGateway, build_provider
from .reformulate import (
    GROUNDED_METHODS,
    METHODS,
    QueryReformulator,
    read_reformulations,
    write_reformulations,
)
from .utils import atomic_write_text, digest, file_digest
from .vector import (
    CachedEmbedder,
    DenseRetriever,
    HashEmbeddingProvider,
    ImpactRetriever,
    OpenAIEmbeddingProvider,
    read_query_impacts,
    sidecar_dim,
)

logger = logging.getLogger(__name__)

RETRIEVER_KINDS = ("lexical", "dense", "impact")
LEADERBOARD_COLUMNS = ("method", "llm", "retriever", "dataset", "metric", "value", "run_digest")
DEFAULT_DEPTH = 1000


@dataclass(frozen=True)
class Finding:
    field: str
    message: str
    blocking: bool = True

    def __str__(self):
        return f"{self.field}: {self.message}"


def load_config(path) -> dict:
    """Parse a YAML/JSON experiment config; relative paths resolve against its folder."""
    path = Path(path)
    try:
        config = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError(f"config {path} must be a mapping")
    config.setdefault("base_dir", str(path.parent.resolve()))
    return config


def _resolve(config: dict, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(config.get("base_dir", ".")) / p


def _method_specs(config) -> list[tuple[str, dict]]:
    out = []
    for entry in config.get("methods") or []:
        if isinstance(entry, str):
            out.append((entry, {}))
        elif isinstance(entry, dict) and "name" in entry:
            out.append((entry["name"], dict(entry.get("params") or {})))
        else:
            out.append((str(entry), {}))
    return out


def _metric_specs(config) -> list[dict]:
    out = []
    for entry in config.get("metrics") or [{"name": "ndcg", "k": 10}, {"name": "recall", "k": 1000}]:
        if isinstance(entry, str):
            name, _, k = entry.partition("@")
            entry = {"name": name, "k": int(k) if k.isdigit() else 0}
        out.append({"name": entry.get("name"), "k": entry.get("k"), "min_rel": entry.get("min_rel", 1)})
    return out


def metric_label(spec: dict) -> str:
    return f"{spec['name']}@{spec['k']}"


def validate(config: dict) -> list[Finding]:
    """Structured findings for a config; an empty list means runnable. Never mutates."""
    findings: list[Finding] = []

    def need(cond, fld, msg, blocking=True):
        if not cond:
            findings.append(Finding(fld, msg, blocking))

    datasets = config.get("datasets") or []
    need(datasets, "datasets", "at least one dataset is required")
    names = set()
    for i, ds in enumerate(datasets):
        prefix = f"datasets[{i}]"
        if not isinstance(ds, dict):
            findings.append(Finding(prefix, "must be a mapping"))
            continue
        name = ds.get("name")
        need(name, f"{prefix}.name", "missing dataset name")
        need(name not in names, f"{prefix}.name", f"duplicate dataset name {name!r}")
        names.add(name)
        for key in ("corpus", "queries", "qrels"):
            if not ds.get(key):
                findings.append(Finding(f"{prefix}.{key}", "missing path"))
            elif not _resolve(config, ds[key]).exists():
                findings.append(Finding(f"{prefix}.{key}", f"path does not exist: {ds[key]}"))
        need(ds.get("corpus_format", "jsonl") in ("jsonl", "tsv"), f"{prefix}.corpus_format",
             f"unknown corpus format {ds.get('corpus_format')!r}")

    retrievers = config.get("retrievers") or []
    need(retrievers, "retrievers", "at least one retriever is required")
    rnames = set()
    for i, r in enumerate(retrievers):
        prefix = f"retrievers[{i}]"
        kind = r.get("kind")
        need(r.get("name"), f"{prefix}.name", "missing retriever name")
        need(r.get("name") not in rnames, f"{prefix}.name", f"duplicate retriever name {r.get('name')!r}")
        rnames.add(r.get("name"))
        if kind not in RETRIEVER_KINDS:
            findings.append(Finding(f"{prefix}.kind", f"unknown retriever kind {kind!r}"))
            continue
        if kind == "dense":
            emb = r.get("embedding") or {}
            dim = emb.get("dim")
            vectors = r.get("vectors") or {}
            need(emb, f"{prefix}.embedding", "dense retriever needs an embedding provider for queries")
            for ds in datasets:
                path = vectors.get(ds.get("name")) if isinstance(vectors, dict) else None
                if path is None:
                    if not emb:
                        findings.append(Finding(f"{prefix}.vectors.{ds.get('name')}", "no vectors sidecar"))
                    continue
                full = _resolve(config, path)
                if not full.exists():
                    findings.append(Finding(f"{prefix}.vectors.{ds.get('name')}", f"path does not exist: {path}"))
                elif dim is not None and sidecar_dim(full) != int(dim):
                    findings.append(Finding(
                        f"{prefix}.vectors.{ds.get('name')}",
                        f"dimension mismatch: sidecar has {sidecar_dim(full)}, embedding declares {dim}",
                    ))
        if kind == "impact":
            impacts = r.get("impacts") or {}
            for ds in datasets:
                path = impacts.get(ds.get("name")) if isinstance(impacts, dict) else None
                if path is None:
                    findings.append(Finding(f"{prefix}.impacts.{ds.get('name')}", "no impacts sidecar"))
                elif not _resolve(config, path).exists():
                    findings.append(Finding(f"{prefix}.impacts.{ds.get('name')}", f"path does not exist: {path}"))
            qimp = r.get("query_impacts") or {}
            for ds_name, path in qimp.items():
                if not _resolve(config, path).exists():
                    findings.append(Finding(f"{prefix}.query_impacts.{ds_name}", f"path does not exist: {path}"))
            need(qimp or r.get("fallback_tf"), f"{prefix}.query_impacts",
                 "no query-side impacts; set fallback_tf: true to use plain term counts", blocking=False)

    methods = _method_specs(config)
    need(methods, "methods", "at least one method is required")
    for i, (name, _) in enumerate(methods):
        need(name in METHODS, f"methods[{i}]", f"unknown method {name!r}")

    llms = config.get("llms") or []
    need(llms, "llms", "at least one LLM configuration is required")
    lnames = set()
    for i, llm in enumerate(llms):
        need(llm.get("name"), f"llms[{i}].name", "missing llm name")
        need(llm.get("name") not in lnames, f"llms[{i}].name", f"duplicate llm name {llm.get('name')!r}")
        lnames.add(llm.get("name"))
        need(llm.get("provider", "mock") in ("mock", "openai"), f"llms[{i}].provider",
             f"unknown provider {llm.get('provider')!r}")
        need(llm.get("provider", "mock") == "mock" or llm.get("model"), f"llms[{i}].model", "missing model name")

    for i, m in enumerate(_metric_specs(config)):
        need(m["name"] in ("ndcg", "recall"), f"metrics[{i}].name", f"unknown metric {m['name']!r}")
        need(isinstance(m["k"], int) and m["k"] >= 1, f"metrics[{i}].k", f"cutoff must be a positive int, got {m['k']!r}")
    return findings


def _build_embedder(spec: dict, cache_dir: Path):
    provider = spec.get("provider", "hash")
    if provider == "hash":
        base = HashEmbeddingProvider(dim=int(spec.get("dim", 64)), model=spec.get("model", "hash-embedding"))
    elif provider == "openai":
        base = OpenAIEmbeddingProvider(model=spec["model"], dim=int(spec["dim"]), base_url=spec.get("base_url"))
    else:
        raise ConfigError(f"unknown embedding provider {provider!r}")
    return CachedEmbedder(base, cache_dir / "embeddings")


class _DatasetState:
    def __init__(self, config: dict, ds: dict):
        self.name = ds["name"]
        self.corpus = ingest_corpus(_resolve(config, ds["corpus"]), ds.get("corpus_format", "jsonl"))
        self.queries = load_queries(_resolve(config, ds["queries"]))
        self.qrels = parse_qrels(_resolve(config, ds["qrels"]))
        self._lexical: dict = {}

    def lexical(self, params: dict) -> BM25Retriever:
        key = json.dumps(params, sort_keys=True)
        if key not in self._lexical:
            self._lexical[key] = BM25Retriever(**params).fit(self.corpus)
        return self._lexical[key]


_LEXICAL_PARAMS = ("k1", "b", "stem", "stopwords", "fb_docs", "fb_terms", "orig_weight")


def _retrieve(retriever, kind: str, rqs, depth: int, tag: str) -> RunList:
    results = {}
    for rq in rqs:
        if kind == "lexical" and rq.weights:
            hits = retriever.search_weighted(WeightedQuery(rq.weights), depth)
        else:
            hits = retriever.search(rq.text_for(kind), depth)
        results[rq.query_id] = list(hits)
    return RunList(results, run_tag=tag)


def run(config: dict, output_root=None) -> dict:
    """Execute every (dataset, llm, method, retriever) cell and write a manifest.

    Existing reformulation and run files are reused, so an interrupted run
    resumes where it stopped. Failing cells are recorded and skipped.
    """
    findings = [f for f in validate(config) if f.blocking]
    if findings:
        raise ConfigError("; ".join(map(str, findings)))
    started = time.perf_counter()
    out = Path(output_root) if output_root else _resolve(config, config.get("output_root", "runs_out"))
    cache_dir = _resolve(config, config["cache_dir"]) if config.get("cache_dir") else out / "cache"
    concurrency = int(config.get("concurrency", 1))
    methods = _method_specs(config)
    metrics = _metric_specs(config)
    grounding = {k: v for k, v in (config.get("grounding") or {}).items() if k in _LEXICAL_PARAMS}

    cells, failures = [], []
    call_counts: dict[str, int] = {}
    for ds in config["datasets"]:
        state = _DatasetState(config, ds)
        retrievers = {}
        for spec in config["retrievers"]:
            try:
                retrievers[spec["name"]] = _make_retriever(config, spec, state, cache_dir)
            except ReformkitError as exc:
                logger.error("retriever %s unavailable for %s: %s", spec["name"], state.name, exc)
                retrievers[spec["name"]] = exc
        for llm in config["llms"]:
            gateway = LLMGateway(
                build_provider(llm),
                cache_dir=cache_dir / "llm",
                audit_log=out / "logs" / "llm_audit.jsonl",
                max_in_flight=int(config.get("max_in_flight", 8)),
            )
            for method, params in methods:
                reform_path = out / "reformulations" / state.name / llm["name"] / f"{method}.jsonl"
                before = gateway.provider_calls + gateway.cache_hits
                try:
                    rqs = _reformulate(method, params, llm, gateway, state, grounding, concurrency, reform_path)
                except Exception as exc:  # a failing cell must not stop the grid
                    logger.error("reformulation %s/%s/%s failed: %s", state.name, llm["name"], method, exc)
                    for spec in config["retrievers"]:
                        failures.append(_failure(state.name, llm["name"], method, spec["name"], exc))
                    continue
                call_counts[f"{state.name}/{llm['name']}/{method}"] = gateway.provider_calls + gateway.cache_hits - before
                for spec in config["retrievers"]:
                    rname = spec["name"]
                    try:
                        retriever = retrievers[rname]
                        if isinstance(retriever, Exception):
                            raise retriever
                        cells.append(_run_cell(out, state, llm["name"], method, spec, retriever, rqs, metrics))
                    except Exception as exc:
                        logger.error("cell %s/%s/%s/%s failed: %s", state.name, llm["name"], method, rname, exc)
                        failures.append(_failure(state.name, llm["name"], method, rname, exc))

    manifest = {
        "toolkit_version": __version__,
        "config_digest": digest({k: v for k, v in config.items() if k != "base_dir"}),
        "output_root": str(out),
        "cells": cells,
        "failures": failures,
        "llm_calls": call_counts,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _failure(dataset, llm, method, retriever, exc) -> dict:
    return {"dataset": dataset, "llm": llm, "method": method, "retriever": retriever,
            "error": f"{type(exc).__name__}: {exc}"}


def _make_retriever(config, spec, state: _DatasetState, cache_dir: Path):
    kind = spec["kind"]
    if kind == "lexical":
        return state.lexical({k: spec[k] for k in _LEXICAL_PARAMS if k in spec})
    if kind == "dense":
        embedder = _build_embedder(spec.get("embedding") or {}, cache_dir)
        vectors = (spec.get("vectors") or {}).get(state.name)
        retriever = DenseRetriever(
            embedder=embedder,
            similarity=spec.get("similarity", "cosine"),
            vectors_path=_resolve(config, vectors) if vectors else None,
        )
        return retriever.fit(state.corpus)
    query_impacts = None
    qpath = (spec.get("query_impacts") or {}).get(state.name)
    if qpath:
        query_impacts = read_query_impacts(_resolve(config, qpath))
    retriever = ImpactRetriever(
        impacts_path=_resolve(config, spec["impacts"][state.name]),
        query_impacts=query_impacts,
        fallback_tf=bool(spec.get("fallback_tf", False)),
    )
    return retriever.fit()


def _reformulate(method, params, llm, gateway, state, grounding, concurrency, path: Path):
    if path.exists():
        rqs = read_reformulations(path)
        if [r.query_id for r in rqs] == [q.query_id for q in state.queries]:
            return rqs
        logger.warning("stale reformulations at %s; regenerating", path)
    reformulator = QueryReformulator(
        method=method,
        gateway=gateway,
        model=llm.get("model", "mock"),
        seed=llm.get("seed"),
        temperature=llm.get("temperature"),
        max_tokens=int(llm.get("max_tokens", 256)),
        method_params=params,
        n_jobs=concurrency,
    )
    retriever = state.lexical(grounding) if method in GROUNDED_METHODS else None
    rqs = reformulator.fit(state.queries, retriever=retriever).transform(state.queries)
    write_reformulations(rqs, path)
    return rqs


def _run_cell(out: Path, state, llm_name, method, spec, retriever, rqs, metrics) -> dict:
    rname, kind = spec["name"], spec["kind"]
    depth = int(spec.get("depth", DEFAULT_DEPTH))
    run_path = out / "runs" / state.name / llm_name / method / f"{rname}.trec"
    if run_path.exists():
        run_list = parse_run(run_path)
    else:
        run_list = _retrieve(retriever, kind, rqs, depth, tag=f"{method}.{rname}".replace(" ", "_"))
        write_run(run_list, run_path)
    reports = {}
    for m in metrics:
        label = metric_label(m)
        report = evaluate(run_list, state.qrels, m["name"], m["k"], min_rel=m["min_rel"])
        stem = out / "reports" / state.name / llm_name / method / rname / label.replace("@", "_at_")
        csv_path, json_path = report.save(stem)
        reports[label] = {
            "mean": report.mean,
            "csv": str(csv_path.relative_to(out)),
            "json": str(json_path.relative_to(out)),
            "digest": file_digest(csv_path),
        }
        if m["name"] == "recall":
            reports[label]["min_rel"] = m["min_rel"]
    reform_path = out / "reformulations" / state.name / llm_name / f"{method}.jsonl"
    # what each retriever actually received, for studying encoder truncation
    lengths = [len(tokenize(rq.text_for(kind))) for rq in rqs]
    return {
        "dataset": state.name,
        "llm": llm_name,
        "method": method,
        "retriever": rname,
        "retriever_kind": kind,
        "reformulations": str(reform_path.relative_to(out)),
        "reformulations_digest": file_digest(reform_path),
        "run": str(run_path.relative_to(out)),
        "run_digest": file_digest(run_path),
        "reports": reports,
        "query_tokens": {"mean": round(sum(lengths) / max(len(lengths), 1), 3), "max": max(lengths, default=0)},
    }


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest.setdefault("output_root", str(path.parent))
    return manifest


def leaderboard_rows(manifests: Sequence[dict]) -> list[dict]:
    """Flatten manifests to one row per (cell, metric), sorted deterministically."""
    if not manifests:
        raise ConfigError("export needs at least one manifest")
    rows: dict[tuple, dict] = {}
    for manifest in manifests:
        for cell in manifest["cells"]:
            for metric, rep in cell["reports"].items():
                key = (cell["method"], cell["llm"], cell["retriever"], cell["dataset"], metric)
                row = dict(zip(LEADERBOARD_COLUMNS, (*key, rep["mean"], cell["run_digest"])))
                prior = rows.get(key)
                if prior is not None and prior["run_digest"] != row["run_digest"]:
                    raise ConflictError(
                        f"conflicting run digests for cell {key}: {prior['run_digest'][:12]} vs "
                        f"{row['run_digest'][:12]}; export the manifests separately or rename the cell"
                    )
                rows[key] = row
    return [rows[k] for k in sorted(rows, key=lambda k: (k[3], k[2], k[1], k[0], k[4]))]


def export_leaderboard(manifests: Sequence[dict], path) -> Path:
    """Write leaderboard rows as CSV (``.csv``) or JSON (anything else)."""
    rows = leaderboard_rows(manifests)
    path = Path(path)
    if path.suffix == ".csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LEADERBOARD_COLUMNS)
        for r in rows:
            writer.writerow([*(r[c] for c in LEADERBOARD_COLUMNS[:5]), f"{r['value']:.6f}", r["run_digest"]])
        return atomic_write_text(path, buf.getvalue())
    return atomic_write_text(path, json.dumps(rows, indent=2) + "\n")


def score_grid_from_manifest(manifest: dict, retriever: str, metric: str) -> ScoreGrid:
    grid = ScoreGrid()
    for cell in manifest["cells"]:
        if cell["retriever"] == retriever and metric in cell["reports"]:
            grid.add(cell["method"], cell["dataset"], cell["llm"], metric, cell["reports"][metric]["mean"])
    return grid


def analyze_manifest(manifest: dict, out_dir, retriever: str, metric: str = "ndcg@10",
                     baseline_method: str = "original", spearman_test: str = "t_approx") -> dict:
    """Stability analytics and delta distributions for one retriever's cells."""
    out_dir = Path(out_dir)
    root = Path(manifest["output_root"])
    written = {}
    grid = score_grid_from_manifest(manifest, retriever, metric)
    atomic_write_text(out_dir / "score_grid.csv", _grid_csv(grid))
    written["score_grid"] = str(out_dir / "score_grid.csv")
    if len(grid.datasets) >= 2 and len(grid.methods) >= 2:
        rows = rank_cv_table(grid, metric)
        write_rank_cv_csv(rows, grid.datasets, out_dir / "rank_cv.csv")
        written["rank_cv"] = str(out_dir / "rank_cv.csv")
    if len(grid.llms) >= 2 and len(grid.methods) >= 3:
        write_spearman_csv(spearman_table(grid, metric, method=spearman_test), out_dir / "spearman.csv")
        written["spearman"] = str(out_dir / "spearman.csv")
    if len(grid.llms) >= 2 and len(grid.methods) >= 2:
        write_variance_json(variance_table(grid, metric), out_dir / "variance_partition.json", {"metric": metric})
        written["variance_partition"] = str(out_dir / "variance_partition.json")

    by_cell = {(c["dataset"], c["retriever"], c["llm"], c["method"]): c for c in manifest["cells"]}
    dists = []
    for (dataset, rname, llm, method), cell in sorted(by_cell.items()):
        base = by_cell.get((dataset, rname, llm, baseline_method))
        if method == baseline_method or base is None or metric not in cell["reports"]:
            continue
        reformed = read_report_csv(root / cell["reports"][metric]["csv"])
        baseline = read_report_csv(root / base["reports"][metric]["csv"])
        dists.append(delta_distribution(
            reformed, baseline, {"dataset": dataset, "retriever": rname, "method": method, "llm": llm}
        ))
    if dists:
        write_delta_csv(dists, out_dir / "delta_points.csv", out_dir / "delta_summary.csv")
        written["delta_points"] = str(out_dir / "delta_points.csv")
        written["delta_summary"] = str(out_dir / "delta_summary.csv")
    return written


def _grid_csv(grid: ScoreGrid) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "dataset", "llm", "metric", "value"])
    for m in grid.methods:
        for d in grid.datasets:
            for l in grid.llms:
                for metric in grid.metrics:
                    try:
                        writer.writerow([m, d, l, metric, f"{grid.value(m, d, l, metric):.6f}"])
                    except ReformkitError:
                        continue
    return buf.getvalue()


def artifact_digests(output_root) -> dict[str, str]:
    """sha256 of every derived artifact (reformulations, runs, reports, leaderboards)."""
    root = Path(output_root)
    out = {}
    for sub in ("reformulations", "runs", "reports", "leaderboard"):
        base = root / sub
        if base.exists():
            for p in sorted(base.rglob("*")):
                if p.is_file():
                    out[str(p.relative_to(root))] = file_digest(p)
    return out

"""Command-line entry point: ``reformkit <verb>``.

Exit status is 0 on success, 1 when an experiment finished with failed cells,
and 2 on configuration or input errors.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import __version__
from .corpus import Analyzer, CorpusHandle, ingest_corpus, load_queries
from .evaluation import RunList, evaluate, parse_metric, parse_qrels, parse_run, write_run
from .exceptions import ReformkitError
from .experiment import (
    analyze_manifest,
    export_leaderboard,
    load_config,
    load_manifest,
    run as run_experiment,
    validate as validate_config,
)
from .lexical import BM25Retriever, InvertedIndex, WeightedQuery, build_index
from .llm import LLMGateway, build_provider
from .reformulate import GROUNDED_METHODS, METHODS, QueryReformulator, read_reformulations, write_reformulations

EXIT_OK, EXIT_CELL_FAILURES, EXIT_CONFIG = 0, 1, 2


def _fail(exc: Exception):
    click.echo(f"error: {exc}", err=True)
    sys.exit(EXIT_CONFIG)


def _load_corpus(path: str, fmt: str) -> CorpusHandle:
    p = Path(path)
    return CorpusHandle.load(p) if p.is_dir() else ingest_corpus(p, fmt)


@click.group()
@click.version_option(__version__, prog_name="reformkit")
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Query reformulation experiments over lexical and vector retrieval."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["jsonl", "tsv"]), default="jsonl")
def ingest(source, out_dir, fmt):
    """Validate a raw corpus and store it in the canonical layout."""
    try:
        corpus = ingest_corpus(source, fmt)
        corpus.save(out_dir)
    except ReformkitError as exc:
        _fail(exc)
    click.echo(f"ingested {corpus.count} documents into {out_dir}")


@main.command()
@click.argument("corpus")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["jsonl", "tsv"]), default="jsonl")
@click.option("--stem/--no-stem", default=False)
@click.option("--dump-postings", type=click.Path(dir_okay=False), help="Also write a text dump of the postings.")
def index(corpus, out_dir, fmt, stem, dump_postings):
    """Build an inverted index over a corpus (raw file or ingested directory)."""
    try:
        idx = build_index(_load_corpus(corpus, fmt), Analyzer(stem=stem))
        idx.save(out_dir)
        if dump_postings:
            with open(dump_postings, "w", encoding="utf-8") as fh:
                idx.dump_postings(fh)
    except ReformkitError as exc:
        _fail(exc)
    click.echo(f"indexed {idx.doc_count} documents, {idx.vocabulary_size} terms into {out_dir}")


@main.command()
@click.argument("queries", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--provider", type=click.Choice(["mock", "openai"]), default="mock")
@click.option("--model", default="mock")
@click.option("--seed", type=int, default=0)
@click.option("--temperature", type=float, default=None, help="Defaults to the method's standard temperature.")
@click.option("--max-tokens", type=int, default=256)
@click.option("--corpus", help="Corpus for grounded methods (raw file or ingested directory).")
@click.option("--corpus-format", type=click.Choice(["jsonl", "tsv"]), default="jsonl")
@click.option("--cache-dir", type=click.Path(file_okay=False), default=".reformkit_cache")
@click.option("--param", "params", multiple=True, help="Method parameter as key=value (JSON value).")
@click.option("--jobs", type=int, default=1)
def reformulate(queries, out, method, provider, model, seed, temperature, max_tokens, corpus,
                corpus_format, cache_dir, params, jobs):
    """Reformulate queries with one method and write JSONL records."""
    try:
        qs = load_queries(queries)
        retriever = None
        if method in GROUNDED_METHODS:
            if not corpus:
                raise click.UsageError(f"method {method} needs --corpus for pseudo-relevance feedback")
            retriever = BM25Retriever().fit(_load_corpus(corpus, corpus_format))
        gateway = LLMGateway(
            build_provider({"provider": provider, "seed": seed}),
            cache_dir=Path(cache_dir) / "llm",
            audit_log=Path(cache_dir) / "llm_audit.jsonl",
        )
        reformulator = QueryReformulator(
            method=method, gateway=gateway, model=model, seed=seed, temperature=temperature,
            max_tokens=max_tokens, method_params=_parse_params(params), n_jobs=jobs,
        )
        rqs = reformulator.fit(qs, retriever=retriever).transform(qs)
        write_reformulations(rqs, out)
    except ReformkitError as exc:
        _fail(exc)
    click.echo(f"wrote {len(rqs)} reformulations ({gateway.provider_calls} provider calls, "
               f"{gateway.cache_hits} cache hits) to {out}")


def _parse_params(pairs) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise click.BadParameter(f"expected key=value, got {pair!r}", param_hint="--param")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


@main.command()
@click.argument("corpus")
@click.argument("queries", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["jsonl", "tsv"]), default="jsonl")
@click.option("--index-dir", type=click.Path(exists=True, file_okay=False), help="Prebuilt index to load.")
@click.option("--k", "depth", type=int, default=1000)
@click.option("--k1", type=float, default=0.9)
@click.option("--b", type=float, default=0.4)
@click.option("--stem/--no-stem", default=False)
@click.option("--tag", default="bm25")
def retrieve(corpus, queries, out, fmt, index_dir, depth, k1, b, stem, tag):
    """BM25 retrieval for plain queries (TSV) or reformulations (JSONL)."""
    try:
        corpus_handle = _load_corpus(corpus, fmt)
        if index_dir:
            retriever = BM25Retriever.from_index(InvertedIndex.load(index_dir), corpus_handle, k1=k1, b=b)
        else:
            retriever = BM25Retriever(k1=k1, b=b, stem=stem).fit(corpus_handle)
        if queries.endswith(".jsonl") and _looks_reformulated(queries):
            results = {}
            for rq in read_reformulations(queries):
                hits = (retriever.search_weighted(WeightedQuery(rq.weights), depth) if rq.weights
                        else retriever.search(rq.final_text, depth))
                results[rq.query_id] = list(hits)
            run_list = RunList(results, run_tag=tag)
        else:
            run_list = retriever.predict(load_queries(queries), k=depth, run_tag=tag)
        write_run(run_list, out)
    except ReformkitError as exc:
        _fail(exc)
    click.echo(f"wrote run for {len(run_list.results)} queries to {out}")


def _looks_reformulated(path) -> bool:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return '"method"' in first and '"final_text"' in first


@main.command("evaluate")
@click.argument("run_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("qrels_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--metric", "metrics", multiple=True, default=("ndcg@10",), show_default=True)
@click.option("--min-rel", type=int, default=1, help="Minimum grade counted as relevant for recall.")
@click.option("--out", "out_stem", help="Write <stem>_<metric>.csv/.json per metric.")
def evaluate_cmd(run_file, qrels_file, metrics, min_rel, out_stem):
    """Score a run file against graded judgments."""
    try:
        run_list, qrels = parse_run(run_file), parse_qrels(qrels_file)
        for spec in metrics:
            name, k = parse_metric(spec)
            report = evaluate(run_list, qrels, name, k, min_rel=min_rel)
            if out_stem:
                report.save(f"{out_stem}_{name}_at_{k}")
            click.echo(f"{report.name}\t{report.mean:.4f}\t({len(report.per_query)} queries, "
                       f"{len(report.excluded)} excluded)")
    except ReformkitError as exc:
        _fail(exc)


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--retriever", required=True, help="Retriever whose cells are analysed.")
@click.option("--metric", default="ndcg@10", show_default=True)
@click.option("--baseline", default="original", show_default=True)
@click.option("--spearman-test", type=click.Choice(["t_approx", "permutation"]), default="t_approx")
def analyze(manifest, out_dir, retriever, metric, baseline, spearman_test):
    """Rank stability, ranking agreement, variance partition and per-query deltas."""
    try:
        written = analyze_manifest(load_manifest(manifest), out_dir, retriever, metric, baseline, spearman_test)
    except ReformkitError as exc:
        _fail(exc)
    for name, path in written.items():
        click.echo(f"{name}\t{path}")


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
def validate(config):
    """Check an experiment config without running it."""
    try:
        findings = validate_config(load_config(config))
    except ReformkitError as exc:
        _fail(exc)
    for f in findings:
        click.echo(f"{'error' if f.blocking else 'warning'}: {f}", err=True)
    sys.exit(EXIT_CONFIG if any(f.blocking for f in findings) else EXIT_OK)


@main.command("run")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--output-root", type=click.Path(file_okay=False), help="Override the config's output_root.")
def run_cmd(config, output_root):
    """Run a full experiment grid from a config file."""
    try:
        manifest = run_experiment(load_config(config), output_root)
    except ReformkitError as exc:
        _fail(exc)
    click.echo(f"{len(manifest['cells'])} cells completed, {len(manifest['failures'])} failed; "
               f"manifest at {Path(manifest['output_root']) / 'manifest.json'}")
    for failure in manifest["failures"]:
        click.echo(f"failed: {failure['dataset']}/{failure['llm']}/{failure['method']}/"
                   f"{failure['retriever']}: {failure['error']}", err=True)
    sys.exit(EXIT_CELL_FAILURES if manifest["failures"] else EXIT_OK)


@main.command()
@click.argument("manifests", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Leaderboard path (.csv or .json).")
def export(manifests, out):
    """Merge manifests into one leaderboard."""
    try:
        export_leaderboard([load_manifest(m) for m in manifests], out)
    except ReformkitError as exc:
        _fail(exc)
    click.echo(f"leaderboard written to {out}")


if __name__ == "__main__":  # pragma: no cover
    main()

import json

import pytest
import yaml
from click.testing import CliRunner

from conftest import build_experiment, write_jsonl_corpus
from reformkit import __version__
from reformkit.cli import main
from reformkit.evaluation import parse_run
from reformkit.reformulate import read_reformulations


@pytest.fixture
def cli():
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)

    return invoke


@pytest.fixture
def toy_files(tmp_path):
    corpus = write_jsonl_corpus(tmp_path / "c.jsonl", {"d1": "ocean tides moon", "d2": "stock market",
                                                       "d3": "moon landing"})
    (tmp_path / "q.tsv").write_text("q1\tmoon\nq2\tmarket\n")
    (tmp_path / "qrels").write_text("q1 0 d1 2\nq1 0 d3 1\nq2 0 d2 1\n")
    return tmp_path, corpus


def test_version(cli):
    result = cli("--version")
    assert __version__ in result.output


def test_ingest_index_retrieve_evaluate(cli, toy_files):
    root, corpus = toy_files
    assert cli("ingest", corpus, root / "store").exit_code == 0
    result = cli("index", root / "store", root / "idx", "--dump-postings", root / "postings.txt")
    assert result.exit_code == 0 and "3 documents" in result.output
    assert (root / "postings.txt").read_text().startswith("landing\t1\td3:1")
    assert cli("retrieve", root / "store", root / "q.tsv", root / "run.trec", "--index-dir", root / "idx").exit_code == 0
    run = parse_run(root / "run.trec")
    assert [d for d, _ in run.results["q1"]] == ["d3", "d1"]  # shorter document wins under length normalisation
    result = cli("evaluate", root / "run.trec", root / "qrels", "--metric", "ndcg@10", "--metric", "recall@100",
                 "--out", root / "rep")
    assert result.exit_code == 0
    lines = result.output.splitlines()
    assert lines[0].startswith("ndcg@10\t") and lines[1].startswith("recall@100\t1.0000")
    assert (root / "rep_ndcg_at_10.csv").exists()


def test_reformulate_then_retrieve(cli, toy_files):
    root, corpus = toy_files
    result = cli("reformulate", root / "q.tsv", root / "r.jsonl", "--method", "q2d_zs", "--seed", "3",
                 "--cache-dir", root / "cache", "--param", "query_repetitions=2")
    assert result.exit_code == 0 and "2 provider calls" in result.output
    rqs = read_reformulations(root / "r.jsonl")
    assert rqs[0].final_text.startswith("moon moon ")
    again = cli("reformulate", root / "q.tsv", root / "r2.jsonl", "--method", "q2d_zs", "--seed", "3",
                "--cache-dir", root / "cache", "--param", "query_repetitions=2")
    assert "0 provider calls, 2 cache hits" in again.output
    assert (root / "r.jsonl").read_bytes() == (root / "r2.jsonl").read_bytes()
    assert cli("retrieve", corpus, root / "r.jsonl", root / "run.trec", "--tag", "q2d").exit_code == 0
    assert "q2d" in (root / "run.trec").read_text()


def test_grounded_method_requires_corpus(cli, toy_files):
    root, corpus = toy_files
    result = CliRunner().invoke(main, ["reformulate", str(root / "q.tsv"), str(root / "r.jsonl"), "--method", "rm3"])
    assert result.exit_code == 2
    ok = cli("reformulate", root / "q.tsv", root / "r.jsonl", "--method", "rm3", "--corpus", corpus,
             "--cache-dir", root / "cache")
    assert ok.exit_code == 0 and read_reformulations(root / "r.jsonl")[0].weights


def test_bad_input_exits_2(cli, tmp_path):
    (tmp_path / "bad.jsonl").write_text("{nope\n")
    result = CliRunner().invoke(main, ["ingest", str(tmp_path / "bad.jsonl"), str(tmp_path / "o")])
    assert result.exit_code == 2 and "bad.jsonl:1:" in result.output


def test_validate_exit_codes(cli, tmp_path):
    path = build_experiment(tmp_path)
    assert CliRunner().invoke(main, ["validate", str(path)]).exit_code == 0
    config = yaml.safe_load(path.read_text())
    config["datasets"][0]["qrels"] = "missing.txt"
    path.write_text(yaml.safe_dump(config))
    result = CliRunner().invoke(main, ["validate", str(path)])
    assert result.exit_code == 2 and "datasets[0].qrels" in result.output


def test_run_analyze_export(cli, tmp_path):
    path = build_experiment(tmp_path)
    result = CliRunner().invoke(main, ["run", str(path)])
    assert result.exit_code == 0, result.output
    manifest = tmp_path / "out" / "manifest.json"
    assert cli("analyze", manifest, tmp_path / "an", "--retriever", "bm25").exit_code == 0
    assert (tmp_path / "an" / "delta_summary.csv").exists()
    assert cli("export", manifest, "--out", tmp_path / "lb.csv").exit_code == 0
    assert (tmp_path / "lb.csv").read_text().startswith("method,llm,retriever,dataset,metric,value,run_digest\n")


def test_run_with_failed_cells_exits_1(tmp_path):
    path = build_experiment(tmp_path, retrievers=("bm25", "impact_strict"))
    result = CliRunner().invoke(main, ["run", str(path), "--output-root", str(tmp_path / "elsewhere")])
    assert result.exit_code == 1
    assert "impact_strict" in result.output
    manifest = json.loads((tmp_path / "elsewhere" / "manifest.json").read_text())
    assert manifest["failures"]


def test_run_config_error_exits_2(tmp_path):
    path = build_experiment(tmp_path)
    config = yaml.safe_load(path.read_text())
    config["methods"] = ["unknown"]
    path.write_text(yaml.safe_dump(config))
    assert CliRunner().invoke(main, ["run", str(path)]).exit_code == 2


def test_export_conflict_exits_2(tmp_path):
    a = build_experiment(tmp_path / "a")
    b = build_experiment(tmp_path / "b", seed=4)
    for p in (a, b):
        assert CliRunner().invoke(main, ["run", str(p)]).exit_code == 0
    result = CliRunner().invoke(main, ["export", str(tmp_path / "a" / "out"), str(tmp_path / "b" / "out"),
                                       "--out", str(tmp_path / "lb.json")])
    assert result.exit_code == 2 and "conflicting" in result.output

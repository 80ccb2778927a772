import io
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_corpus
from oracles import brute_bm25, brute_rank, brute_rm3, random_corpus
from reformkit.corpus import Document, tokenize
from reformkit.exceptions import IndexStateError, ParseError, PreconditionError
from reformkit.lexical import (
    BM25Retriever,
    InvertedIndex,
    WeightedQuery,
    bm25_search,
    build_index,
    rm3_expand,
    weighted_search,
)


def tokenized(docs):
    return {d: tokenize(t) for d, t in docs.items()}


def test_postings_small_example():
    index = build_index(make_corpus({"d1": "a b", "d2": "b c"}))
    assert index.postings("a") == [("d1", 1)]
    assert index.postings("b") == [("d1", 1), ("d2", 1)]
    assert index.postings("c") == [("d2", 1)]
    assert index.avg_doc_len == 2
    assert index.doc_count == 2


def test_single_doc_term_frequency():
    index = build_index(make_corpus({"d": "x x x"}))
    assert index.doc_length("d") == 3
    assert index.postings("x") == [("d", 3)]


def test_postings_sorted_and_sum_to_length():
    docs = random_corpus(60, 40, seed=3)
    index = build_index(make_corpus(docs))
    for term in index.terms:
        ids = [d for d, _ in index.postings(term)]
        assert ids == sorted(ids)
    for doc_id, toks in tokenized(docs).items():
        assert sum(index.doc_vector(doc_id).values()) == index.doc_length(doc_id) == len(toks)


def test_empty_corpus_and_unbuilt_index():
    with pytest.raises(PreconditionError):
        build_index(make_corpus({}))
    with pytest.raises(IndexStateError):
        bm25_search(InvertedIndex(), ["a"], 10)


def test_absent_terms_give_empty_list(toy_docs):
    index = build_index(make_corpus(toy_docs))
    assert len(bm25_search(index, ["zzz"], 5)) == 0


def test_toy_query_matches_brute_force(toy_docs):
    index = build_index(make_corpus(toy_docs))
    got = bm25_search(index, ["b", "c"], 4)
    expected = brute_rank(brute_bm25(tokenized(toy_docs), ["b", "c"]), 4)
    assert got.doc_ids == [d for d, _ in expected]
    for (_, s), (_, e) in zip(got, expected):
        assert s == pytest.approx(e, abs=1e-9)


def test_hand_computed_top_score():
    # Lengths total 50 over 10 docs, so the average length is 5.
    docs = {
        "dA": "apple apple x y z",
        "dB": "apple q",
        **{f"f{i}": " ".join(["filler"] * n) for i, n in enumerate([5, 5, 5, 5, 5, 6, 6, 6])},
    }
    index = build_index(make_corpus(docs))
    assert index.avg_doc_len == 5.0
    top = bm25_search(index, ["apple"], 1, k1=0.9, b=0.4)
    idf = math.log(1 + (10 - 2 + 0.5) / (2 + 0.5))
    hand = idf * 2 * 1.9 / (2 + 0.9 * (0.6 + 0.4 * 5 / 5))
    assert top.doc_ids == ["dA"]
    assert top[0][1] == pytest.approx(hand, abs=1e-9)


@pytest.mark.parametrize("seed", range(8))
def test_random_corpora_match_brute_force(seed):
    docs = random_corpus(100, 30, seed=seed)
    index = build_index(make_corpus(docs))
    toks = tokenized(docs)
    rng = random.Random(seed)
    for _ in range(10):
        query = rng.choices([f"t{i}" for i in range(35)], k=rng.randint(1, 5))
        k = rng.choice([1, 5, 100])
        expected = brute_rank(brute_bm25(toks, query), k)
        got = bm25_search(index, query, k)
        assert got.doc_ids == [d for d, _ in expected]
        assert max((abs(s - e) for (_, s), (_, e) in zip(got, expected)), default=0) <= 1e-9


def test_ties_break_by_doc_id():
    index = build_index(make_corpus({"c": "x", "a": "x", "b": "x"}))
    assert bm25_search(index, ["x"], 3).doc_ids == ["a", "b", "c"]


def test_weighted_search_reductions(toy_docs):
    index = build_index(make_corpus(toy_docs))
    plain = bm25_search(index, ["b", "c"], 4)
    uniform = weighted_search(index, WeightedQuery({"b": 1, "c": 1}), 4)
    assert list(plain) == list(uniform)
    doubled = weighted_search(index, WeightedQuery({"b": 2, "c": 0}), 4)
    assert list(doubled) == list(bm25_search(index, ["b", "b"], 4))
    half = weighted_search(index, WeightedQuery({"d": 0.5}), 4)
    assert half.doc_ids == bm25_search(index, ["d"], 4).doc_ids


def test_weighted_query_validation():
    with pytest.raises(PreconditionError):
        WeightedQuery({"a": 0.0})
    with pytest.raises(PreconditionError):
        WeightedQuery({"a": -1.0})
    with pytest.raises(PreconditionError):
        WeightedQuery({"a": float("nan")})


def test_rm3_toy_matches_brute_force(toy_docs):
    index = build_index(make_corpus(toy_docs))
    got = rm3_expand(index, ["b", "c"], fb_docs=2, fb_terms=2, orig_weight=0.5)
    expected = brute_rm3(tokenized(toy_docs), ["b", "c"], 2, 2, 0.5)
    assert set(got.terms) == set(expected)
    for t, w in expected.items():
        assert got.terms[t] == pytest.approx(w, abs=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_rm3_random_matches_brute_force(seed):
    docs = random_corpus(80, 25, seed=100 + seed)
    index = build_index(make_corpus(docs))
    toks = tokenized(docs)
    query = ["t1", "t7", f"t{seed + 10}"]
    for fb_docs, fb_terms, w in [(10, 10, 0.5), (3, 5, 0.2), (1, 100, 0.9)]:
        got = rm3_expand(index, query, fb_docs, fb_terms, w)
        expected = brute_rm3(toks, query, fb_docs, fb_terms, w)
        assert got.terms.keys() == expected.keys()
        assert max(abs(got.terms[t] - expected[t]) for t in expected) <= 1e-9


def test_rm3_endpoints_and_no_feedback(toy_docs):
    index = build_index(make_corpus(toy_docs))
    only_query = rm3_expand(index, ["b", "b", "c"], 2, 5, orig_weight=1.0)
    assert only_query.terms == pytest.approx({"b": 2 / 3, "c": 1 / 3})
    wide = rm3_expand(index, ["a"], fb_docs=4, fb_terms=1000, orig_weight=0.3)
    assert math.fsum(wide.terms.values()) == pytest.approx(1.0, abs=1e-12)
    none = rm3_expand(index, ["zzz"], 3, 3, 0.5)
    assert none.flags == ("no_feedback",)
    assert none.terms == {"zzz": 1.0}


def test_rm3_rejects_bad_params(toy_docs):
    index = build_index(make_corpus(toy_docs))
    with pytest.raises(PreconditionError):
        rm3_expand(index, ["a"], fb_docs=0, fb_terms=1, orig_weight=0.5)
    with pytest.raises(PreconditionError):
        rm3_expand(index, ["a"], fb_docs=1, fb_terms=1, orig_weight=1.5)


def test_index_save_load_round_trip(tmp_path):
    docs = random_corpus(50, 30, seed=9)
    index = build_index(make_corpus(docs))
    index.save(tmp_path / "idx")
    loaded = InvertedIndex.load(tmp_path / "idx")
    assert loaded.doc_ids == index.doc_ids and loaded.terms == index.terms
    query = ["t0", "t3", "t3"]
    assert list(bm25_search(loaded, query, 20)) == list(bm25_search(index, query, 20))


def test_index_load_rejects_foreign_directory(tmp_path):
    with pytest.raises(IndexStateError):
        InvertedIndex.load(tmp_path)
    (tmp_path / "meta.json").write_text('{"format": "other", "version": 1}')
    with pytest.raises(ParseError):
        InvertedIndex.load(tmp_path)


def test_dump_postings_is_readable():
    index = build_index(make_corpus({"d1": "a b", "d2": "b c"}))
    buf = io.StringIO()
    index.dump_postings(buf)
    assert buf.getvalue().splitlines() == ["a\t1\td1:1", "b\t2\td1:1 d2:1", "c\t1\td2:1"]


def test_retriever_estimator_api(toy_docs):
    retriever = BM25Retriever(k1=1.2, b=0.75)
    assert retriever.get_params()["k1"] == 1.2
    retriever.fit(make_corpus(toy_docs))
    hits = retriever.search("B c!", 2)
    assert hits.doc_ids == bm25_search(retriever.index_, ["b", "c"], 2, 1.2, 0.75).doc_ids
    assert retriever.document("d2").text == "b c"
    run = retriever.predict([type("Q", (), {"query_id": "q", "text": "d"})()], k=3)
    assert [d for d, _ in run.results["q"]] == bm25_search(retriever.index_, ["d"], 3, 1.2, 0.75).doc_ids


def test_top_terms_by_df_ties_by_term():
    index = build_index(make_corpus({"1": "b a c", "2": "a b", "3": "c"}))
    assert index.top_terms_by_df(3) == ["a", "b", "c"]


words = st.sampled_from(["alpha", "beta", "gamma", "delta", "eps"])
doc_text = st.lists(words, min_size=1, max_size=8).map(" ".join)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.from_regex(r"d[0-9]{1,3}", fullmatch=True), doc_text, min_size=1, max_size=15),
       st.lists(words, min_size=1, max_size=4))
def test_property_bm25_equals_brute_force(docs, query):
    index = build_index(make_corpus(docs))
    expected = brute_rank(brute_bm25(tokenized(docs), query), 50)
    got = bm25_search(index, query, 50)
    assert got.doc_ids == [d for d, _ in expected]
    for (_, s), (_, e) in zip(got, expected):
        assert abs(s - e) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.from_regex(r"d[0-9]{1,3}", fullmatch=True), doc_text, min_size=1, max_size=15),
       st.lists(words, min_size=1, max_size=4),
       st.integers(1, 5), st.integers(1, 12), st.floats(0, 1))
def test_property_rm3_weights_form_distribution(docs, query, fb_docs, fb_terms, w):
    index = build_index(make_corpus(docs))
    wq = rm3_expand(index, query, fb_docs, fb_terms, w)
    assert all(v >= 0 for v in wq.terms.values())
    assert abs(math.fsum(wq.terms.values()) - 1.0) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.from_regex(r"d[0-9]{1,3}", fullmatch=True), doc_text, min_size=1, max_size=12),
       words)
def test_property_irrelevant_docs_keep_order(docs, term):
    # Mirrored lengths keep the average length fixed; a single query term means
    # the idf shift scales every score by the same factor.
    index = build_index(make_corpus(docs))
    extra = {f"zz{i}": " ".join(["unrelated"] * len(t.split())) for i, t in enumerate(docs.values())}
    grown = build_index(make_corpus({**docs, **extra}))
    assert grown.avg_doc_len == pytest.approx(index.avg_doc_len)
    assert bm25_search(grown, [term], 100).doc_ids == bm25_search(index, [term], 100).doc_ids
    assert list(bm25_search(index, [term], 100)) == list(bm25_search(index, [term], 100))


def test_weighted_uniform_reproduces_plain_exactly():
    docs = random_corpus(70, 20, seed=21)
    index = build_index(make_corpus(docs))
    query = ["t0", "t2", "t5"]
    assert list(weighted_search(index, WeightedQuery.from_tokens(query), 70)) == list(bm25_search(index, query, 70))


def test_documents_sorted_regardless_of_input_order():
    a = build_index([Document("b", "x y"), Document("a", "y z")])
    b = build_index([Document("a", "y z"), Document("b", "x y")])
    assert list(bm25_search(a, ["y"], 5)) == list(bm25_search(b, ["y"], 5))

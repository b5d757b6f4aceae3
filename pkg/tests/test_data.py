import pytest
from hypothesis import given
from hypothesis import strategies as st

from progdistill.data import (Corpus, DataError, Dataset, Prepared, QuerySet, SyntheticSpec, bow_rank,
                              generate_synthetic, load_corpus, load_dataset, relevant_ids, save_dataset)


def test_corpus_and_queries_validation():
    with pytest.raises(DataError):
        Corpus(["a", "a"], ["x", "y"])
    with pytest.raises(DataError):
        Corpus([""], ["x"])
    with pytest.raises(DataError):
        Corpus(["a"], [])
    with pytest.raises(DataError):
        QuerySet(["q"], ["x"], split="valid")
    with pytest.raises(DataError):
        QuerySet(["q", "q"], ["x", "y"])


def test_synthetic_is_deterministic_and_well_formed():
    spec = SyntheticSpec(num_clusters=3, passages_per_cluster=10, queries_per_cluster=5, seed=1)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a == b
    assert len(a.corpus) == 30
    assert sum(len(q) for q in a.queries.values()) == 15
    assert len(a.queries["dev"]) == 3 * 2 and len(a.queries["test"]) == 3
    for qid, rel in a.qrels.items():
        assert len(relevant_ids(a.qrels, qid)) == 10
    assert generate_synthetic(SyntheticSpec(num_clusters=3, passages_per_cluster=10, queries_per_cluster=5,
                                            seed=2)) != a


def test_synthetic_noise_free_bow_oracle_is_perfect():
    ds = generate_synthetic(SyntheticSpec(num_clusters=4, passages_per_cluster=10, queries_per_cluster=3,
                                          noise_token_rate=0.0, vocab_tokens_per_cluster=8))
    for qs in ds.queries.values():
        for qid, text in zip(qs.ids, qs.texts):
            top = bow_rank(ds, text, 1)
            assert top[0] in relevant_ids(ds.qrels, qid)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(num_clusters=0)
    with pytest.raises(ValueError):
        SyntheticSpec(noise_token_rate=1.0)


def test_dataset_round_trip(tmp_path, small_ds):
    ds = Dataset(small_ds.corpus, small_ds.queries, small_ds.qrels, {"q0000": ["c0w1", "c0w2"]})
    save_dataset(tmp_path, ds)
    back = load_dataset(tmp_path)
    assert back.corpus.ids == ds.corpus.ids and back.corpus.texts == ds.corpus.texts
    assert {s: (q.ids, q.texts) for s, q in back.queries.items()} == \
        {s: (q.ids, q.texts) for s, q in ds.queries.items()}
    assert back.qrels == ds.qrels and back.answers == ds.answers


@given(st.lists(st.text(alphabet="abc é́", min_size=1, max_size=8), min_size=1, max_size=5))
def test_corpus_file_round_trip(tmp_path_factory, texts):
    texts = [t.replace("\n", " ") for t in texts]
    path = tmp_path_factory.mktemp("c") / "corpus.tsv"
    path.write_text("".join(f"p{i}\t{t}\n" for i, t in enumerate(texts)), encoding="utf-8")
    import unicodedata
    assert load_corpus(path).texts == [unicodedata.normalize("NFC", t) for t in texts]


def test_malformed_files(tmp_path):
    (tmp_path / "corpus.tsv").write_text("no tab here\n")
    with pytest.raises(DataError, match="corpus.tsv:1"):
        load_corpus(tmp_path / "corpus.tsv")
    (tmp_path / "corpus.tsv").write_text("\n")
    with pytest.raises(DataError, match="empty"):
        load_corpus(tmp_path / "corpus.tsv")
    with pytest.raises(OSError):
        load_corpus(tmp_path / "missing.tsv")
    (tmp_path / "corpus.tsv").write_text("p1\tx\n")
    (tmp_path / "qrels.txt").write_text("q1 0 p1 high\n")
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_prepared_tokenizes_everything(small_ds):
    prep = Prepared(small_ds, vocab_size=100, max_query_len=4, max_passage_len=6)
    assert len(prep.passage_tokens) == len(small_ds.corpus)
    pid = small_ds.corpus.ids[5]
    assert prep.passage(pid) is prep.passage_tokens[5]
    assert len(prep.passage(pid)) <= 6
    assert set(prep.query_ids("train")) <= set(prep.query_tokens)
    assert prep.query_ids("nonexistent") == []

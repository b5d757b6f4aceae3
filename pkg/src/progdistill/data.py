"""Corpus/query/qrels files and the synthetic clustered benchmark."""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .encoders import TokenSequence, tokenize
from .retrieval import Qrels, read_qrels, write_qrels

SPLITS = ("train", "dev", "test")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Corpus:
    ids: list[str]
    texts: list[str]

    def __post_init__(self):
        if len(self.ids) != len(self.texts):
            raise DataError("corpus ids and texts differ in length")
        seen = set()
        for pid in self.ids:
            if not pid:
                raise DataError("empty passage id")
            if pid in seen:
                raise DataError(f"duplicate passage id {pid!r}")
            seen.add(pid)
        self._pos = {pid: i for i, pid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def text(self, pid: str) -> str:
        return self.texts[self._pos[pid]]

    def index_of(self, pid: str) -> int:
        return self._pos[pid]


@dataclass
class QuerySet:
    ids: list[str]
    texts: list[str]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if len(set(self.ids)) != len(self.ids):
            dup = next(q for q in self.ids if self.ids.count(q) > 1)
            raise DataError(f"duplicate query id {dup!r}")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Dataset:
    corpus: Corpus
    queries: dict[str, QuerySet]
    qrels: Qrels
    answers: dict[str, list[str]] = field(default_factory=dict)


def _read_tsv(path: str | Path) -> list[tuple[str, str]]:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    rows = []
    for lineno, line in enumerate(raw.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, text = line.partition("\t")
        if not sep or not key:
            raise DataError(f"{path}:{lineno}: expected 'id<TAB>text'")
        rows.append((key, unicodedata.normalize("NFC", text)))
    return rows


def _write_tsv(path: str | Path, ids, texts) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, t in zip(ids, texts):
            f.write(f"{i}\t{t}\n")


def load_corpus(path: str | Path) -> Corpus:
    rows = _read_tsv(path)
    if not rows:
        raise DataError(f"{path}: corpus is empty")
    return Corpus([r[0] for r in rows], [r[1] for r in rows])


def load_queries(path: str | Path, split: str = "train") -> QuerySet:
    rows = _read_tsv(path)
    return QuerySet([r[0] for r in rows], [r[1] for r in rows], split)


def load_qrels(path: str | Path) -> Qrels:
    try:
        return read_qrels(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def save_corpus(path, corpus: Corpus) -> None:
    _write_tsv(path, corpus.ids, corpus.texts)


def save_queries(path, queries: QuerySet) -> None:
    _write_tsv(path, queries.ids, queries.texts)


def load_dataset(root: str | Path) -> Dataset:
    """Read ``corpus.tsv``, ``queries.<split>.tsv``, ``qrels.txt`` and optional ``answers.tsv``."""
    root = Path(root)
    queries = {}
    for split in SPLITS:
        p = root / f"queries.{split}.tsv"
        if p.exists():
            queries[split] = load_queries(p, split)
    answers: dict[str, list[str]] = {}
    if (root / "answers.tsv").exists():
        for qid, ans in _read_tsv(root / "answers.tsv"):
            answers.setdefault(qid, []).append(ans)
    return Dataset(load_corpus(root / "corpus.tsv"), queries, load_qrels(root / "qrels.txt"), answers)


def save_dataset(root: str | Path, ds: Dataset) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_corpus(root / "corpus.tsv", ds.corpus)
    for split, qs in ds.queries.items():
        save_queries(root / f"queries.{split}.tsv", qs)
    write_qrels(root / "qrels.txt", ds.qrels)
    if ds.answers:
        _write_tsv(root / "answers.tsv",
                   [q for q, a in ds.answers.items() for _ in a],
                   [x for a in ds.answers.values() for x in a])


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    num_clusters: int = 8
    passages_per_cluster: int = 250
    queries_per_cluster: int = 25
    vocab_tokens_per_cluster: int = 60
    noise_token_rate: float = 0.3
    seed: int = 7
    passage_length: int = 20
    query_length: int = 4
    dev_fraction: float = 0.4
    test_fraction: float = 0.2

    def __post_init__(self):
        for name in ("num_clusters", "passages_per_cluster", "queries_per_cluster",
                     "vocab_tokens_per_cluster", "passage_length", "query_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.noise_token_rate < 1:
            raise ValueError("noise_token_rate must lie in [0, 1)")

    @property
    def corpus_size(self) -> int:
        return self.num_clusters * self.passages_per_cluster


def _word(cluster: int, j: int) -> str:
    return f"c{cluster}w{j}"


def _sample_text(rng: np.random.Generator, spec: SyntheticSpec, cluster: int, length: int) -> str:
    words = []
    for _ in range(length):
        src = cluster
        if spec.num_clusters > 1 and rng.random() < spec.noise_token_rate:
            src = int(rng.integers(spec.num_clusters - 1))
            src += src >= cluster
        words.append(_word(src, int(rng.integers(spec.vocab_tokens_per_cluster))))
    return " ".join(words)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    """Clustered corpus where a query is relevant to every passage of its cluster.

    Cluster ``c`` owns the words ``c{c}w0 .. c{c}w{V-1}``; each token is drawn
    from the owning pool, or with probability ``noise_token_rate`` from a
    different cluster's pool.
    """
    rng = np.random.default_rng(spec.seed)
    n_pass = spec.corpus_size
    clusters = np.repeat(np.arange(spec.num_clusters), spec.passages_per_cluster)
    order = rng.permutation(n_pass)
    pid_cluster = clusters[order]
    width = len(str(n_pass))
    pids = [f"p{i:0{width}d}" for i in range(n_pass)]
    texts = [_sample_text(rng, spec, int(c), spec.passage_length) for c in pid_cluster]
    members: dict[int, list[str]] = {c: [] for c in range(spec.num_clusters)}
    for pid, c in zip(pids, pid_cluster):
        members[int(c)].append(pid)

    n_dev = int(round(spec.queries_per_cluster * spec.dev_fraction))
    n_test = int(round(spec.queries_per_cluster * spec.test_fraction))
    split_rows: dict[str, list[tuple[str, int]]] = {s: [] for s in SPLITS}
    qtexts: dict[str, str] = {}
    counter = 0
    for c in range(spec.num_clusters):
        for j in range(spec.queries_per_cluster):
            qid = f"q{counter:04d}"
            counter += 1
            qtexts[qid] = _sample_text(rng, spec, c, spec.query_length)
            split = "dev" if j < n_dev else "test" if j < n_dev + n_test else "train"
            split_rows[split].append((qid, c))
    queries = {s: QuerySet([q for q, _ in rows], [qtexts[q] for q, _ in rows], s)
               for s, rows in split_rows.items()}
    qrels = {q: {pid: 1 for pid in members[c]} for rows in split_rows.values() for q, c in rows}
    return Dataset(Corpus(pids, texts), queries, qrels)


def bow_rank(ds: Dataset, query_text: str, k: int = 10) -> list[str]:
    """Bag-of-words overlap ranking; the oracle for noise-free synthetic data."""
    qw = set(query_text.split())
    scored = sorted(((-len(qw.intersection(t.split())), pid) for pid, t in zip(ds.corpus.ids, ds.corpus.texts)))
    return [pid for _, pid in scored[:k]]


def relevant_ids(qrels: Mapping[str, Mapping[str, int]], qid: str) -> frozenset:
    return frozenset(p for p, g in qrels.get(qid, {}).items() if g > 0)


class Prepared:
    """A dataset with every passage and query tokenized for one encoder setup."""

    def __init__(self, ds: Dataset, vocab_size: int, max_query_len: int, max_passage_len: int):
        self.ds = ds
        self.corpus = ds.corpus
        self.qrels = ds.qrels
        self.passage_tokens = [tokenize(t, max_passage_len, vocab_size) for t in ds.corpus.texts]
        self.query_tokens = {qid: tokenize(t, max_query_len, vocab_size)
                             for qs in ds.queries.values() for qid, t in zip(qs.ids, qs.texts)}

    def passage(self, pid: str) -> TokenSequence:
        return self.passage_tokens[self.corpus.index_of(pid)]

    def query_ids(self, split: str) -> list[str]:
        qs = self.ds.queries.get(split)
        return list(qs.ids) if qs is not None else []

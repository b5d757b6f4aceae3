"""Hard-negative mining and confusing-query selection."""
from __future__ import annotations

import hashlib
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import Prepared, relevant_ids
from .encoders import CrossEncoder, DualEncoder, encode_corpus, encode_query_batch
from .losses import CandidateGroup
from .retrieval import EmbeddingIndex, RankedList, search_batch

log = logging.getLogger(__name__)

INF_RANK = math.inf
MODES = ("window_intersection", "score_dominance")


@dataclass(frozen=True)
class MiningConfig:
    depth_k: int = 100
    sample_m: int = 15
    seed: int = 0
    answer_filter: bool = False

    def __post_init__(self):
        if self.depth_k < 1 or self.sample_m < 1:
            raise ValueError("depth_k and sample_m must be positive")
        if self.sample_m > self.depth_k:
            raise ValueError(f"sample_m ({self.sample_m}) exceeds depth_k ({self.depth_k})")


@dataclass(frozen=True)
class ConfusionFilter:
    """Half-open rank windows ``(lo, hi]`` on the positive's student/teacher rank."""

    student_window: tuple[int, int] = (1, 15)
    teacher_window: tuple[int, int] = (0, 1)
    mode: str = "window_intersection"

    def __post_init__(self):
        for lo, hi in (self.student_window, self.teacher_window):
            if not 0 <= lo < hi:
                raise ValueError(f"bad rank window ({lo}, {hi}]")
        if self.mode not in MODES:
            raise ValueError(f"unknown selection mode {self.mode!r}")

    @staticmethod
    def _inside(rank: float, window: tuple[int, int]) -> bool:
        lo, hi = window
        return lo < rank <= hi

    def accepts(self, r: PositiveRanks) -> bool:
        if self.mode == "window_intersection":
            return self._inside(r.student_rank, self.student_window) and \
                self._inside(r.teacher_rank, self.teacher_window)
        return (r.teacher_norm > r.student_norm
                and self._inside(r.student_rank, (0, self.student_window[1]))
                and self._inside(r.teacher_rank, (0, self.teacher_window[1])))


@dataclass
class MiningResult:
    groups: list[CandidateGroup]
    retrievals: dict[str, RankedList]
    counters: Counter = field(default_factory=Counter)


@dataclass(frozen=True)
class PositiveRanks:
    student_rank: float
    teacher_rank: float
    student_norm: float = 0.0
    teacher_norm: float = 0.0


@dataclass
class ConfusionDataset:
    iteration: int
    groups: list[CandidateGroup]
    counters: Counter = field(default_factory=Counter)

    def __len__(self) -> int:
        return len(self.groups)


def derive_seed(seed: int, query_id: str) -> int:
    """Stable 64-bit seed from ``(seed, query_id)`` via blake2b."""
    digest = hashlib.blake2b(f"{seed}\x1f{query_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


_WS = re.compile(r"\s+")


def _norm(text: str) -> str:
    return _WS.sub(" ", text.casefold()).strip()


def filter_false_negatives(candidates: RankedList, answers: Sequence[str],
                           texts: Mapping[str, str] | None = None, corpus=None) -> RankedList:
    """Drop candidates whose text contains any answer (case/whitespace-insensitive)."""
    needles = [_norm(a) for a in answers if _norm(a)]
    if not needles:
        return candidates

    def text(pid):
        return texts[pid] if texts is not None else corpus.text(pid)

    drop = {e.passage_id for e in candidates.entries if any(n in _norm(text(e.passage_id)) for n in needles)}
    return candidates.without(drop) if drop else candidates


def build_index(student: DualEncoder, data: Prepared, threads: int = 1) -> EmbeddingIndex:
    return EmbeddingIndex(data.corpus.ids, encode_corpus(student, data.passage_tokens, threads=threads))


def retrieve(student: DualEncoder, data: Prepared, query_ids: Sequence[str], k: int, threads: int = 1,
             index: EmbeddingIndex | None = None) -> dict[str, RankedList]:
    if index is None:
        index = build_index(student, data, threads)
    qmat = encode_query_batch(student, [data.query_tokens[q] for q in query_ids])
    return search_batch(index, list(query_ids), qmat, k, threads=threads)


def mine_hard_negatives(student: DualEncoder, data: Prepared, query_ids: Sequence[str], cfg: MiningConfig,
                        threads: int = 1) -> MiningResult:
    """Top-k retrieval minus positives, then a seeded uniform sample of negatives."""
    if len(data.corpus) == 0:
        raise ValueError("cannot mine against an empty corpus")
    retrievals = retrieve(student, data, query_ids, cfg.depth_k, threads)
    counters: Counter = Counter()
    groups = []
    for qid in sorted(query_ids):
        positives = relevant_ids(data.qrels, qid)
        if not positives:
            counters["dropped_no_positive"] += 1
            continue
        pool = retrievals[qid].without(positives)
        if cfg.answer_filter and data.ds.answers.get(qid):
            before = len(pool)
            pool = filter_false_negatives(pool, data.ds.answers[qid], corpus=data.corpus)
            counters["answer_filtered"] += before - len(pool)
        rng = np.random.default_rng(derive_seed(cfg.seed, qid))
        pos = sorted(positives)[int(rng.integers(len(positives)))]
        if len(pool) == 0:
            counters["dropped_no_negative"] += 1
            continue
        take = np.sort(rng.choice(len(pool), size=min(cfg.sample_m, len(pool)), replace=False))
        negs = [pool.entries[i].passage_id for i in take]
        groups.append(make_group(data, qid, pos, negs))
        counters["groups"] += 1
    return MiningResult(groups, retrievals, counters)


def make_group(data: Prepared, qid: str, positive_id: str, negative_ids: Sequence[str]) -> CandidateGroup:
    return CandidateGroup.build(qid, data.query_tokens[qid], positive_id, data.passage(positive_id),
                                [(n, data.passage(n)) for n in negative_ids],
                                known_positive_ids=relevant_ids(data.qrels, qid))


def random_negative_groups(data: Prepared, query_ids: Sequence[str], num_negatives: int, seed: int) -> list[CandidateGroup]:
    """Groups with uniformly random non-relevant negatives (warm-up data)."""
    groups = []
    ids = data.corpus.ids
    for qid in sorted(query_ids):
        positives = relevant_ids(data.qrels, qid)
        if not positives:
            continue
        rng = np.random.default_rng(derive_seed(seed, qid))
        pos = sorted(positives)[int(rng.integers(len(positives)))]
        negs: list[str] = []
        while len(negs) < num_negatives and len(negs) + len(positives) < len(ids):
            cand = ids[int(rng.integers(len(ids)))]
            if cand not in positives and cand not in negs:
                negs.append(cand)
        if negs:
            groups.append(make_group(data, qid, pos, negs))
    return groups


# ---------------------------------------------------------------- positive ranks


def _minmax(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min()
    return (x - x.min()) / span if span > 0 else np.zeros_like(x)


def _rank_in_pool(pool_ids: Sequence[str], scores: np.ndarray, target: str) -> int:
    order = sorted(range(len(pool_ids)), key=lambda i: (-scores[i], pool_ids[i]))
    return 1 + [pool_ids[i] for i in order].index(target)


def positive_ranks(student: DualEncoder, teacher: CrossEncoder, group: CandidateGroup, retrieval: RankedList,
                   exclude: frozenset = frozenset(), data: Prepared | None = None) -> PositiveRanks:
    """Rank of the group's positive under the student retrieval and under CE rescoring.

    Passages in ``exclude`` (other relevant passages) are removed before
    ranking, so the positive is ranked against non-relevant candidates only.
    """
    return positive_ranks_batch(student, teacher, [group], {group.query_id: retrieval},
                                {group.query_id: exclude}, data)[group.query_id]


def positive_ranks_batch(student: DualEncoder, teacher: CrossEncoder, groups: Sequence[CandidateGroup],
                         retrievals: Mapping[str, RankedList], excludes: Mapping[str, frozenset] | None = None,
                         data: Prepared | None = None, chunk_pairs: int = 4096) -> dict[str, PositiveRanks]:
    excludes = excludes or {}
    pools, queries = [], []
    for g in groups:
        drop = set(excludes.get(g.query_id, ())) - {g.positive_id}
        filtered = retrievals[g.query_id].without(drop)
        others = [e for e in filtered.entries if e.passage_id != g.positive_id]
        pools.append((g, filtered, others))
        queries.append(g.query)

    # student score of each positive, needed when it falls outside the retrieval depth
    with nx.no_grad():
        qv = student.encode_queries(queries).data
        pv = student.encode_passages([g.positive for g in groups]).data
    pos_student = np.einsum("ij,ij->i", qv, pv)

    pair_q, pair_p = [], []
    for g, _, others in pools:
        known = dict(zip(g.candidate_ids, g.candidates))
        seqs = [g.positive]
        for e in others:
            seq = known.get(e.passage_id)
            if seq is None:
                if data is None:
                    raise ValueError(f"no tokens for retrieved passage {e.passage_id!r}; pass data")
                seq = data.passage(e.passage_id)
            seqs.append(seq)
        pair_q.extend([g.query] * len(seqs))
        pair_p.extend(seqs)
    ce_scores = []
    with nx.no_grad():
        for i in range(0, len(pair_q), chunk_pairs):
            ce_scores.append(teacher.score_pairs(pair_q[i:i + chunk_pairs], pair_p[i:i + chunk_pairs]).data.reshape(-1))
    ce = np.concatenate(ce_scores) if ce_scores else np.zeros(0)

    out, start = {}, 0
    for j, (g, filtered, others) in enumerate(pools):
        n = 1 + len(others)
        t_scores = ce[start:start + n]
        start += n
        ids = [g.positive_id] + [e.passage_id for e in others]
        s_scores = np.array([pos_student[j]] + [e.score for e in others])
        out[g.query_id] = PositiveRanks(
            student_rank=filtered.rank_of(g.positive_id),
            teacher_rank=_rank_in_pool(ids, t_scores, g.positive_id),
            student_norm=float(_minmax(s_scores)[0]),
            teacher_norm=float(_minmax(t_scores)[0]),
        )
    return out


def select_confusing_queries(ranks: Mapping[str, PositiveRanks], groups: Sequence[CandidateGroup],
                             filt: ConfusionFilter, iteration: int = 1) -> ConfusionDataset:
    """Keep the groups whose positive ranks pass ``filt``."""
    counters: Counter = Counter()
    kept = []
    for g in groups:
        r = ranks.get(g.query_id)
        counters["candidates"] += 1
        if r is None:
            counters["missing_ranks"] += 1
            continue
        if math.isinf(r.student_rank):
            counters["student_rank_beyond_depth"] += 1
        if filt.accepts(r):
            kept.append(g)
            counters["selected"] += 1
        else:
            counters["rejected"] += 1
    return ConfusionDataset(iteration, kept, counters)


# ---------------------------------------------------------------- files


def write_groups(path: str | Path, groups: Sequence[CandidateGroup]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for g in groups:
            f.write(f"{g.query_id}\t{g.positive_id}\t{','.join(g.negative_ids)}\n")


def read_groups(path: str | Path, data: Prepared) -> list[CandidateGroup]:
    groups = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            qid, pos, negs = parts
            if qid not in data.query_tokens:
                raise ValueError(f"{path}:{lineno}: unknown query id {qid!r}")
            try:
                groups.append(make_group(data, qid, pos, [n for n in negs.split(",") if n]))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown passage id {exc.args[0]!r}") from None
    return groups


def selection_report(ds: ConfusionDataset, filt: ConfusionFilter) -> str:
    lines = [f"iteration {ds.iteration}",
             f"filter mode={filt.mode} student=({filt.student_window[0]},{filt.student_window[1]}] "
             f"teacher=({filt.teacher_window[0]},{filt.teacher_window[1]}]"]
    for key in sorted(ds.counters):
        lines.append(f"{key} {ds.counters[key]}")
    return "\n".join(lines) + "\n"

"""Exact inner-product top-k search and TREC run/qrels files."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .numerics import ShapeError

BLOCK_ROWS = 4096

Qrels = dict  # query_id -> {passage_id: grade}


@dataclass(frozen=True)
class RankedEntry:
    passage_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class RankedList:
    query_id: str
    entries: tuple[RankedEntry, ...]

    def __post_init__(self):
        ids = [e.passage_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate passages in ranking for {self.query_id!r}")
        for i, e in enumerate(self.entries):
            if e.rank != i + 1:
                raise ValueError("ranks must be consecutive from 1")
            if i and e.score > self.entries[i - 1].score:
                raise ValueError("scores must be non-increasing")

    @classmethod
    def from_scored(cls, query_id: str, scored: Iterable[tuple[str, float]]) -> RankedList:
        """Sort ``(passage_id, score)`` pairs by score desc, id asc."""
        ordered = sorted(scored, key=lambda x: (-x[1], x[0]))
        return cls(query_id, tuple(RankedEntry(pid, float(s), i + 1) for i, (pid, s) in enumerate(ordered)))

    @property
    def passage_ids(self) -> list[str]:
        return [e.passage_id for e in self.entries]

    def without(self, drop) -> RankedList:
        """Remove passages in ``drop`` and renumber ranks."""
        kept = [e for e in self.entries if e.passage_id not in drop]
        return RankedList(self.query_id, tuple(RankedEntry(e.passage_id, e.score, i + 1) for i, e in enumerate(kept)))

    def rank_of(self, passage_id: str) -> float:
        for e in self.entries:
            if e.passage_id == passage_id:
                return e.rank
        return math.inf

    def __len__(self) -> int:
        return len(self.entries)


class EmbeddingIndex:
    """Immutable passage embedding matrix with string ids."""

    def __init__(self, passage_ids: Sequence[str], matrix: np.ndarray):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(passage_ids):
            raise ShapeError("one embedding row per passage id is required")
        if len(set(passage_ids)) != len(passage_ids):
            raise ValueError("passage ids must be unique")
        self.passage_ids = list(passage_ids)
        self.matrix = matrix
        self.matrix.flags.writeable = False
        # rank of each id in ascending string order, for tie-breaking
        order = sorted(range(len(passage_ids)), key=lambda i: passage_ids[i])
        self._id_rank = np.empty(len(passage_ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(passage_ids))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def _block_topk(self, start: int, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        scores = self.matrix[start:start + BLOCK_ROWS] @ q
        idx = _topk_indices(scores, self._id_rank[start:start + BLOCK_ROWS], k)
        return idx + start, scores[idx]


def _topk_indices(scores: np.ndarray, tiebreak: np.ndarray, k: int) -> np.ndarray:
    n = scores.shape[0]
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((tiebreak[cand], -scores[cand]))
    return cand[order[:k]]


def search_topk(index: EmbeddingIndex, query_vec, k: int, query_id: str = "", threads: int = 1) -> RankedList:
    """Exact top-k by inner product; ties go to the smaller passage id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(getattr(query_vec, "data", query_vec), dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ShapeError(f"query dim {q.shape[0]} != index dim {index.dim}")
    starts = range(0, len(index), BLOCK_ROWS)
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda s: index._block_topk(s, q, k), starts))
    else:
        parts = [index._block_topk(s, q, k) for s in starts]
    idx = np.concatenate([p[0] for p in parts])
    scores = np.concatenate([p[1] for p in parts])
    order = np.lexsort((index._id_rank[idx], -scores))[:k]
    entries = tuple(RankedEntry(index.passage_ids[idx[j]], float(scores[j]), r + 1)
                    for r, j in enumerate(order))
    return RankedList(query_id, entries)


def search_batch(index: EmbeddingIndex, query_ids: Sequence[str], query_matrix: np.ndarray, k: int,
                 threads: int = 1) -> dict[str, RankedList]:
    """Search every row of ``query_matrix``; result keyed by query id."""
    def one(i):
        return search_topk(index, query_matrix[i], k, query_ids[i])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            lists = list(pool.map(one, range(len(query_ids))))
    else:
        lists = [one(i) for i in range(len(query_ids))]
    return {r.query_id: r for r in lists}


# ---------------------------------------------------------------- TREC files


def write_run(path: str | Path, runs: Mapping[str, RankedList] | Iterable[RankedList], tag: str = "run") -> None:
    lists = runs.values() if isinstance(runs, Mapping) else runs
    with open(path, "w", encoding="utf-8") as f:
        for rl in lists:
            for e in rl.entries:
                f.write(f"{rl.query_id} Q0 {e.passage_id} {e.rank} {e.score:.6f} {tag}\n")


def read_run(path: str | Path) -> dict[str, RankedList]:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, pid, rank, score, _ = parts
            rows.setdefault(qid, []).append((int(rank), pid, float(score)))
    out = {}
    for qid, items in rows.items():
        items.sort()
        out[qid] = RankedList(qid, tuple(RankedEntry(pid, s, i + 1) for i, (_, pid, s) in enumerate(items)))
    return out


def write_qrels(path: str | Path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid, rel in qrels.items():
            for pid, grade in rel.items():
                f.write(f"{qid} 0 {pid} {grade}\n")


def read_qrels(path: str | Path) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                grade = int(parts[3])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: grade {parts[3]!r} is not an integer") from None
            if grade < 0:
                raise ValueError(f"{path}:{lineno}: negative grade")
            qrels.setdefault(parts[0], {})[parts[2]] = grade
    return qrels

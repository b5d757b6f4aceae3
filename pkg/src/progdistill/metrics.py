"""Rank-cutoff retrieval metrics: MRR, Recall, nDCG, MAP.

Relevance is binary (grade > 0) everywhere except nDCG, which uses graded
gains ``2**grade - 1``. Dataset-level values are macro averages over the
queries that appear in both the run and the qrels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .retrieval import Qrels, RankedList

log = logging.getLogger(__name__)


def _relevant(grades: Mapping[str, int]) -> set[str]:
    return {pid for pid, g in grades.items() if g > 0}


def query_mrr(run: RankedList, grades: Mapping[str, int], k: int) -> float:
    rel = _relevant(grades)
    for e in run.entries[:k]:
        if e.passage_id in rel:
            return 1.0 / e.rank
    return 0.0


def query_recall(run: RankedList, grades: Mapping[str, int], k: int) -> float:
    rel = _relevant(grades)
    if not rel:
        return 0.0
    return len(rel.intersection(run.passage_ids[:k])) / len(rel)


def dcg(gains: Iterable[float]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains))


def query_ndcg(run: RankedList, grades: Mapping[str, int], k: int) -> float:
    ideal = dcg(sorted((2.0 ** g - 1 for g in grades.values() if g > 0), reverse=True)[:k])
    if ideal == 0:
        return 0.0
    return dcg(2.0 ** grades.get(pid, 0) - 1 for pid in run.passage_ids[:k]) / ideal


def query_ap(run: RankedList, grades: Mapping[str, int], k: int) -> float:
    rel = _relevant(grades)
    if not rel:
        return 0.0
    hits, total = 0, 0.0
    for e in run.entries[:k]:
        if e.passage_id in rel:
            hits += 1
            total += hits / e.rank
    return total / len(rel)


_PER_QUERY = {"mrr": query_mrr, "recall": query_recall, "ndcg": query_ndcg, "map": query_ap}


@dataclass
class MetricResult:
    value: float
    evaluated: int
    skipped: int = 0       # run queries absent from qrels
    no_relevant: int = 0   # queries whose grades are all zero
    per_query: dict = field(default_factory=dict)


def _as_runs(runs) -> list[RankedList]:
    if isinstance(runs, RankedList):
        return [runs]
    if isinstance(runs, Mapping):
        return list(runs.values())
    return list(runs)


def compute(metric: str, runs, qrels: Qrels, k: int) -> MetricResult:
    """Evaluate ``metric`` in {mrr, recall, ndcg, map} at cutoff ``k``."""
    if k < 1:
        raise ValueError("cutoff k must be >= 1")
    fn = _PER_QUERY[metric]
    per_query, skipped, empty = {}, 0, 0
    for rl in _as_runs(runs):
        grades = qrels.get(rl.query_id)
        if grades is None:
            skipped += 1
            continue
        if not _relevant(grades):
            empty += 1
        per_query[rl.query_id] = fn(rl, grades, k)
    if skipped:
        log.info("%s@%d: %d run queries missing from qrels were skipped", metric, k, skipped)
    if empty:
        log.warning("%s@%d: %d queries have no positive grade", metric, k, empty)
    value = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricResult(value, len(per_query), skipped, empty, per_query)


def mrr_at_k(runs, qrels: Qrels, k: int = 10) -> float:
    return compute("mrr", runs, qrels, k).value


def recall_at_k(runs, qrels: Qrels, k: int) -> float:
    return compute("recall", runs, qrels, k).value


def ndcg_at_k(runs, qrels: Qrels, k: int = 10) -> float:
    return compute("ndcg", runs, qrels, k).value


def map_at_k(runs, qrels: Qrels, k: int = 1000) -> float:
    return compute("map", runs, qrels, k).value


def parse_metric(spec: str) -> tuple[str, int]:
    """``"mrr@10"`` -> ``("mrr", 10)``."""
    name, _, cut = spec.lower().partition("@")
    if name not in _PER_QUERY or not cut.isdigit() or int(cut) < 1:
        raise ValueError(f"bad metric spec {spec!r}; expected e.g. mrr@10, recall@50, ndcg@10, map@1000")
    return name, int(cut)


def evaluate(runs, qrels: Qrels, specs: Iterable[str]) -> dict[str, float]:
    out = {}
    for spec in specs:
        name, k = parse_metric(spec)
        out[spec] = compute(name, runs, qrels, k).value
    return out

"""Slow, obviously-correct reference implementations used by the tests."""
import math

import numpy as np


def matmul_loops(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def full_sort_topk(ids, scores, k):
    pairs = sorted(zip(ids, scores), key=lambda t: (-t[1], t[0]))
    return pairs[:k]


def brute_mrr(ranked, grades, k):
    for pos in range(min(k, len(ranked))):
        if grades.get(ranked[pos], 0) > 0:
            return 1.0 / (pos + 1)
    return 0.0


def brute_recall(ranked, grades, k):
    rel = [p for p, g in grades.items() if g > 0]
    if not rel:
        return 0.0
    hit = sum(1 for p in rel if p in ranked[:k])
    return hit / len(rel)


def brute_ndcg(ranked, grades, k):
    gains = np.array([2.0 ** grades.get(p, 0) - 1.0 for p in ranked[:k]])
    disc = np.array([1.0 / math.log2(r + 1) for r in range(1, len(gains) + 1)])
    dcg = float((gains * disc).sum())
    ideal = sorted([2.0 ** g - 1.0 for g in grades.values() if g > 0], reverse=True)[:k]
    idcg = sum(g / math.log2(r + 1) for r, g in enumerate(ideal, 1))
    return dcg / idcg if idcg > 0 else 0.0


def brute_ap(ranked, grades, k):
    rel = {p for p, g in grades.items() if g > 0}
    if not rel:
        return 0.0
    precisions = []
    for r in range(1, min(k, len(ranked)) + 1):
        if ranked[r - 1] in rel:
            precisions.append(len(rel.intersection(ranked[:r])) / r)
    return sum(precisions) / len(rel)


def rank_in(ids, scores, target):
    """1-based rank of ``target`` after a full sort by score desc, id asc."""
    order = [p for p, _ in sorted(zip(ids, scores), key=lambda t: (-t[1], t[0]))]
    return order.index(target) + 1


def random_run(rng, qid, n_passages=30, depth=None, ties=False):
    """A random ranking and graded qrels for one query, as plain lists/dicts."""
    ids = [f"p{i:03d}" for i in range(n_passages)]
    scores = rng.integers(0, 5, n_passages).astype(float) if ties else rng.normal(size=n_passages)
    order = [p for p, _ in sorted(zip(ids, scores), key=lambda t: (-t[1], t[0]))]
    ranked = order[:depth or rng.integers(1, n_passages + 1)]
    graded = rng.choice(ids, size=rng.integers(0, 6), replace=False)
    grades = {p: int(rng.integers(0, 4)) for p in graded}
    return ranked, {p: float(s) for p, s in zip(ids, scores)}, grades


def audit_selection(student, teacher, groups, data, depth, student_window=(1, 15), teacher_window=(0, 1)):
    """Recompute DPD selection from scratch: one encoder call per passage, full sorts.

    Returns the set of query ids whose positive lands inside both rank windows.
    """
    pids = list(data.corpus.ids)
    pmat = np.stack([student.encode_passages([data.passage(p)]).data[0] for p in pids])
    chosen = set()
    for g in groups:
        relevant = {p for p, v in data.qrels.get(g.query_id, {}).items() if v > 0}
        q = student.encode_queries([g.query]).data[0]
        scores = pmat @ q
        top = [p for p, _ in sorted(zip(pids, scores), key=lambda t: (-t[1], t[0]))[:depth]]
        pool = [p for p in top if p == g.positive_id or p not in relevant]
        s_rank = pool.index(g.positive_id) + 1 if g.positive_id in pool else math.inf
        cands = [g.positive_id] + [p for p in pool if p != g.positive_id]
        ce = [float(teacher.score_pairs([g.query], [data.passage(p)]).data.item()) for p in cands]
        t_rank = rank_in(cands, ce, g.positive_id)
        if student_window[0] < s_rank <= student_window[1] and teacher_window[0] < t_rank <= teacher_window[1]:
            chosen.add(g.query_id)
    return chosen

"""Hard, soft and regularization losses for distilling a dual-encoder student.

Every loss works on a :class:`CandidateGroup`: one query scored against its
positive followed by its negatives, always in that order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoders import CrossEncoder, DualEncoder, TokenSequence
from .numerics import Distribution, Tensor, kl_divergence, softmax_temp


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateGroup:
    query_id: str
    query: TokenSequence
    positive_id: str
    positive: TokenSequence
    negative_ids: tuple[str, ...]
    negatives: tuple[TokenSequence, ...]
    in_batch_extension: bool = False
    # other passages judged relevant to the query; never used as in-batch negatives
    known_positive_ids: frozenset = field(default=frozenset(), compare=False)

    def __post_init__(self):
        if not self.negative_ids:
            raise nx.ContractError(f"group {self.query_id!r} has no negatives")
        if len(self.negative_ids) != len(self.negatives):
            raise ValueError("negative ids and sequences differ in length")
        if self.positive_id in self.negative_ids:
            raise ValueError(f"group {self.query_id!r} lists its positive among negatives")
        if len(set(self.negative_ids)) != len(self.negative_ids):
            raise ValueError(f"group {self.query_id!r} has duplicate negatives")

    @classmethod
    def build(cls, query_id, query, positive_id, positive, negatives, **kw) -> CandidateGroup:
        """Construct from ``(id, tokens)`` negatives, dropping the positive and repeats."""
        seen = {positive_id}
        ids, seqs = [], []
        for pid, seq in negatives:
            if pid in seen:
                continue
            seen.add(pid)
            ids.append(pid)
            seqs.append(seq)
        return cls(query_id, query, positive_id, positive, tuple(ids), tuple(seqs), **kw)

    @property
    def candidate_ids(self) -> tuple[str, ...]:
        return (self.positive_id,) + self.negative_ids

    @property
    def candidates(self) -> tuple[TokenSequence, ...]:
        return (self.positive,) + self.negatives

    def __len__(self) -> int:
        return 1 + len(self.negative_ids)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.9
    gamma: float = 0.0
    tau: float = 4.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ConfigError("at least one of alpha, beta must be positive")


def extend_in_batch(groups: Sequence[CandidateGroup]) -> list[CandidateGroup]:
    """Append every other group's positive to each group's negatives."""
    out = []
    for g in groups:
        extra = [(o.positive_id, o.positive) for o in groups
                 if o.positive_id not in g.known_positive_ids]
        merged = list(zip(g.negative_ids, g.negatives)) + extra
        out.append(CandidateGroup.build(g.query_id, g.query, g.positive_id, g.positive, merged,
                                        in_batch_extension=True,
                                        known_positive_ids=g.known_positive_ids))
    return out


# ---------------------------------------------------------------- scoring


def candidate_scores(model: DualEncoder | CrossEncoder, groups: Sequence[CandidateGroup]) -> list[Tensor]:
    """One 1-d score tensor per group, positive first."""
    if isinstance(model, CrossEncoder):
        qs = [g.query for g in groups for _ in range(len(g))]
        ps = [p for g in groups for p in g.candidates]
        flat = nx.reshape(model.score_pairs(qs, ps), (-1,))
        out, start = [], 0
        for g in groups:
            out.append(flat[start:start + len(g)])
            start += len(g)
        return out

    q_index: dict[str, int] = {}
    p_index: dict[str, int] = {}
    q_seqs, p_seqs = [], []
    for g in groups:
        if g.query_id not in q_index:
            q_index[g.query_id] = len(q_seqs)
            q_seqs.append(g.query)
        for pid, seq in zip(g.candidate_ids, g.candidates):
            if pid not in p_index:
                p_index[pid] = len(p_seqs)
                p_seqs.append(seq)
    q = model.encode_queries(q_seqs)
    p = model.encode_passages(p_seqs)
    sim = q @ nx.transpose(p)
    out = []
    for g in groups:
        cols = [p_index[pid] for pid in g.candidate_ids]
        out.append(nx.gather(sim, [q_index[g.query_id]] * len(cols), cols))
    return out


def _frozen_scores(model, groups) -> list[Tensor]:
    with nx.no_grad():
        return candidate_scores(model, groups)


def hard_loss_from_scores(scores: Tensor) -> Tensor:
    return nx.neg(nx.log_softmax(scores)[0])


# ---------------------------------------------------------------- public losses


def hard_loss(student: DualEncoder, group: CandidateGroup) -> Tensor:
    """Contrastive cross-entropy of the positive against the pool (no temperature)."""
    return hard_loss_from_scores(candidate_scores(student, [group])[0])


def soft_distribution(scorer: DualEncoder | CrossEncoder, group: CandidateGroup, tau: float) -> Distribution:
    return softmax_temp(candidate_scores(scorer, [group])[0], tau)


def soft_loss(teacher_dist: Distribution, student_dist: Distribution) -> Tensor:
    return kl_divergence(teacher_dist, student_dist)


def regularization_loss(frozen: DualEncoder, student: DualEncoder, group: CandidateGroup, tau: float) -> Tensor:
    """KL from the frozen snapshot's distribution to the student's."""
    ref = softmax_temp(_frozen_scores(frozen, [group])[0], tau)
    return kl_divergence(ref, soft_distribution(student, group, tau))


def stage1_loss(student: DualEncoder, de_teacher: DualEncoder, group: CandidateGroup,
                weights: LossWeights) -> Tensor:
    if weights.gamma != 0:
        raise ConfigError("stage I loss has no regularization term; gamma must be 0")
    return batch_loss(student, de_teacher, [group], weights).loss


def stage2_loss(student: DualEncoder, ce_teacher: CrossEncoder, frozen_student: DualEncoder | None,
                group: CandidateGroup, weights: LossWeights) -> Tensor:
    if group.in_batch_extension:
        raise ConfigError("cross-encoder stages use mined hard negatives only")
    return batch_loss(student, ce_teacher, [group], weights, frozen=frozen_student).loss


# ---------------------------------------------------------------- batched form


@dataclass
class LossParts:
    loss: Tensor
    hard: float
    soft: float
    reg: float


def batch_loss(student: DualEncoder, teacher, groups: Sequence[CandidateGroup], weights: LossWeights,
               frozen: DualEncoder | None = None) -> LossParts:
    """Mean over groups of ``alpha*hard + beta*soft + gamma*reg``.

    ``teacher`` may be None for pure hard-loss training. Teacher and frozen
    scores are computed without recording a graph.
    """
    if weights.gamma > 0 and frozen is None:
        raise ConfigError("gamma > 0 requires a frozen student snapshot")
    student_scores = candidate_scores(student, groups)
    teacher_scores = _frozen_scores(teacher, groups) if teacher is not None and weights.beta > 0 else None
    frozen_scores = _frozen_scores(frozen, groups) if frozen is not None and weights.gamma > 0 else None
    terms = []
    hard_sum = soft_sum = reg_sum = 0.0
    for i, s in enumerate(student_scores):
        parts = []
        if weights.alpha > 0:
            h = hard_loss_from_scores(s)
            hard_sum += h.item()
            parts.append(h * weights.alpha)
        if teacher_scores is not None or frozen_scores is not None:
            sd = softmax_temp(s, weights.tau)
            if teacher_scores is not None:
                kl = kl_divergence(softmax_temp(teacher_scores[i], weights.tau), sd)
                soft_sum += kl.item()
                parts.append(kl * weights.beta)
            if frozen_scores is not None:
                r = kl_divergence(softmax_temp(frozen_scores[i], weights.tau), sd)
                reg_sum += r.item()
                parts.append(r * weights.gamma)
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        terms.append(total)
    n = len(groups)
    loss = nx.reshape(nx.concat([nx.reshape(t, (1,)) for t in terms]), (n,)).sum() * (1.0 / n)
    return LossParts(loss, hard_sum / n, soft_sum / n, reg_sum / n)


# ---------------------------------------------------------------- multi-teacher


MULTI_TEACHER_STRATEGIES = ("random_batch", "merge_score", "merge_loss")


def merge_distributions(dists: Sequence[Distribution]) -> Distribution:
    """Entrywise mean of teacher distributions, renormalized."""
    if not dists:
        raise ConfigError("no teacher distributions to merge")
    mean = np.mean([d.probs for d in dists], axis=0)
    return Distribution.from_probs(mean / mean.sum())


def multi_teacher_soft_loss(strategy: str, teacher_dists: Sequence[Distribution], student_dist: Distribution,
                            choice: int = 0) -> Tensor:
    """Soft loss against several teachers; ``choice`` picks the random_batch teacher."""
    if not teacher_dists:
        raise ConfigError("empty teacher set")
    if strategy == "random_batch":
        return kl_divergence(teacher_dists[choice], student_dist)
    if strategy == "merge_score":
        return kl_divergence(merge_distributions(teacher_dists), student_dist)
    if strategy == "merge_loss":
        # per-teacher losses added up, each scaled by 1/N so beta keeps its meaning
        share = 1.0 / len(teacher_dists)
        total = kl_divergence(teacher_dists[0], student_dist) * share
        for d in teacher_dists[1:]:
            total = total + kl_divergence(d, student_dist) * share
        return total
    raise ConfigError(f"unknown multi-teacher strategy {strategy!r}")


def multi_teacher_batch_loss(strategy: str, student: DualEncoder, teachers: Sequence, groups: Sequence[CandidateGroup],
                             weights: LossWeights, choice: int = 0) -> Tensor:
    student_scores = candidate_scores(student, groups)
    per_teacher = [_frozen_scores(t, groups) for t in teachers]
    terms = []
    for i, s in enumerate(student_scores):
        sd = softmax_temp(s, weights.tau)
        tds = [softmax_temp(ts[i], weights.tau) for ts in per_teacher]
        soft = multi_teacher_soft_loss(strategy, tds, sd, choice)
        terms.append(hard_loss_from_scores(s) * weights.alpha + soft * weights.beta)
    n = len(groups)
    return nx.concat([nx.reshape(t, (1,)) for t in terms]).sum() * (1.0 / n)


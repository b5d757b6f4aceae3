"""Warm-up, teacher training, staged distillation and confusing-data iterations."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .config import PipelineConfig, StageSpec, validate
from .data import Dataset, Prepared, relevant_ids
from .encoders import CrossEncoder, DualEncoder, save_checkpoint
from .losses import (CandidateGroup, ConfigError, LossParts, LossWeights, batch_loss, candidate_scores,
                     extend_in_batch, hard_loss_from_scores, multi_teacher_batch_loss, MULTI_TEACHER_STRATEGIES)
from .metrics import compute
from .mining import (derive_seed, mine_hard_negatives, positive_ranks_batch,
                     random_negative_groups, retrieve, select_confusing_queries, write_groups)
from .optim import AdamW, OptimConfig, lr_at
from .retrieval import write_run

log = logging.getLogger(__name__)

REPORT_METRICS = ("mrr@10", "recall@5", "recall@20", "recall@50", "recall@100")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class FrozenSnapshot:
    model: DualEncoder
    taken_at: str
    checksum: str

    @classmethod
    def capture(cls, student: DualEncoder, taken_at: str) -> FrozenSnapshot:
        frozen = student.copy()
        frozen.set_requires_grad(False)
        return cls(frozen, taken_at, frozen.checksum())

    def verify(self) -> None:
        if self.model.checksum() != self.checksum:
            raise RuntimeError(f"frozen snapshot from {self.taken_at} was modified")


@dataclass(frozen=True)
class TrainHyper:
    steps: int
    learning_rate: float
    batch_size: int
    warmup_ratio: float = 0.1
    seed: int = 0
    optim: OptimConfig = OptimConfig()


# ---------------------------------------------------------------- generic loop


def train_loop(model, groups: Sequence[CandidateGroup], hyper: TrainHyper,
               loss_fn: Callable[[list[CandidateGroup], int], LossParts | nx.Tensor],
               tag: str = "train") -> list[float]:
    """Run ``hyper.steps`` AdamW updates over shuffled mini-batches; returns per-step losses."""
    if hyper.steps == 0 or not groups:
        return []
    opt = AdamW(model.parameters(), hyper.optim)
    rng = np.random.default_rng(hyper.seed)
    order: list[int] = []
    history = []
    bs = min(hyper.batch_size, len(groups))
    for step in range(hyper.steps):
        if len(order) < bs:
            order.extend(int(i) for i in rng.permutation(len(groups)))
        batch = [groups[i] for i in order[:bs]]
        del order[:bs]
        opt.zero_grad()
        out = loss_fn(batch, step)
        loss = out.loss if isinstance(out, LossParts) else out
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"{tag}: non-finite loss at step {step}")
        nx.backward(loss)
        opt.step(lr_at(step, hyper.steps, hyper.learning_rate, hyper.warmup_ratio))
        history.append(value)
        if step % 50 == 0 or step == hyper.steps - 1:
            log.debug("%s step %d/%d loss %.6f", tag, step + 1, hyper.steps, value)
    return history


def listwise_loss(model, groups: Sequence[CandidateGroup]) -> nx.Tensor:
    """Mean softmax cross-entropy of the positive over each group's pool."""
    terms = [nx.reshape(hard_loss_from_scores(s), (1,)) for s in candidate_scores(model, groups)]
    return nx.concat(terms).sum() * (1.0 / len(terms))


# ---------------------------------------------------------------- operations


def train_teacher(kind: str, layers: int, groups: Sequence[CandidateGroup], hyper: TrainHyper,
                  model_cfg=None, init=None, seed: int = 0, embed_from: DualEncoder | None = None
                  ) -> tuple[DualEncoder | CrossEncoder, list[float]]:
    """Train (or continue training ``init``) a DE/CE teacher with the listwise contrastive loss.

    DE teachers see in-batch positives as extra negatives; CE teachers only
    their mined pool. ``embed_from`` seeds a fresh teacher's token
    embeddings from a trained dual encoder's passage tower.
    """
    if init is not None:
        teacher = init.copy()
        teacher.set_requires_grad(True)
    else:
        enc = model_cfg.encoder(layers, seed)
        teacher = DualEncoder(enc) if kind == "dual_encoder" else CrossEncoder(enc)
        if embed_from is not None:
            src = embed_from.passage_tower.params[f"{embed_from.passage_tower.prefix}.embed"].data
            for tower in _towers(teacher):
                dst = tower.params[f"{tower.prefix}.embed"]
                if dst.data.shape != src.shape:
                    raise ConfigError("embedding shapes differ between teacher and source encoder")
                dst.data[...] = src
    if kind == "dual_encoder":
        fn = lambda batch, _: listwise_loss(teacher, extend_in_batch(batch))
    else:
        fn = lambda batch, _: listwise_loss(teacher, batch)
    history = train_loop(teacher, groups, hyper, fn, tag=f"teacher-{kind}")
    return teacher, history


def _towers(model) -> list:
    if isinstance(model, CrossEncoder):
        return [model.joint_tower]
    if model.passage_tower is model.query_tower:
        return [model.query_tower]
    return [model.query_tower, model.passage_tower]


def distill_stage(student: DualEncoder, teacher, groups: Sequence[CandidateGroup], spec: StageSpec,
                  frozen: FrozenSnapshot | None = None, hyper: TrainHyper | None = None,
                  telemetry: list | None = None) -> DualEncoder:
    """Distill ``teacher`` into a copy of ``student`` with the stage loss; returns the copy."""
    if spec.use_regularization and frozen is None:
        raise ConfigError("stage requires a frozen student snapshot")
    if not spec.use_regularization and frozen is not None:
        raise ConfigError("frozen snapshot given to a stage without regularization")
    if spec.teacher_kind == "dual_encoder" and spec.gamma != 0:
        raise ConfigError("dual-encoder stage must have gamma = 0")
    hyper = hyper or TrainHyper(spec.steps, spec.learning_rate, spec.batch_size, spec.warmup_ratio)
    out = student.copy()
    out.set_requires_grad(True)
    weights = spec.weights
    frozen_model = frozen.model if frozen is not None else None

    def fn(batch, _):
        if spec.use_in_batch:
            batch = extend_in_batch(batch)
        parts = batch_loss(out, teacher, batch, weights, frozen=frozen_model)
        if telemetry is not None:
            telemetry.append({"loss": parts.loss.item(), "hard": parts.hard, "soft": parts.soft, "reg": parts.reg})
        return parts

    train_loop(out, groups, hyper, fn, tag=f"distill-{spec.label}")
    if frozen is not None:
        frozen.verify()
    return out


def multi_teacher_baseline(strategy: str, teachers: Sequence, student: DualEncoder,
                           groups: Sequence[CandidateGroup], weights: LossWeights, hyper: TrainHyper) -> DualEncoder:
    """Train a student copy against several teachers at once (Random Batch / Merge Score / Merge Loss)."""
    if strategy not in MULTI_TEACHER_STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {MULTI_TEACHER_STRATEGIES}")
    if not teachers:
        raise ConfigError("multi-teacher baseline needs at least one teacher")
    out = student.copy()
    out.set_requires_grad(True)
    rng = np.random.default_rng(derive_seed(hyper.seed, f"multi/{strategy}"))

    def fn(batch, _):
        choice = int(rng.integers(len(teachers))) if strategy == "random_batch" else 0
        return multi_teacher_batch_loss(strategy, out, teachers, batch, weights, choice)

    train_loop(out, groups, hyper, fn, tag=f"baseline-{strategy}")
    return out


def evaluate_student(student: DualEncoder, data: Prepared, split: str, depth: int = 100,
                     threads: int = 1, metrics: Sequence[str] = REPORT_METRICS) -> tuple[dict[str, float], dict]:
    qids = data.query_ids(split)
    runs = retrieve(student, data, qids, min(depth, len(data.corpus)), threads)
    values = {}
    for spec in metrics:
        name, k = spec.split("@")
        values[spec] = compute(name, runs, data.qrels, int(k)).value
    return values, runs


# ---------------------------------------------------------------- pipeline


@dataclass
class PipelineResult:
    student: DualEncoder
    pure_student: DualEncoder
    tpd_student: DualEncoder
    teachers: list
    records: list[dict] = field(default_factory=list)

    def metric(self, event: str, key: str = "mrr@10", **match) -> float:
        for r in self.records:
            if r["event"] == event and all(r.get(k) == v for k, v in match.items()):
                return r["metrics"][key]
        raise KeyError(f"no {event} record matching {match}")

    def report_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


class Runner:
    """Owns one pipeline run: data, config, seeds, checkpoints and report."""

    def __init__(self, cfg: PipelineConfig, data: Prepared | Dataset, out_dir: str | Path | None = None,
                 threads: int = 1):
        self.cfg = validate(cfg)
        if isinstance(data, Dataset):
            m = cfg.model
            data = Prepared(data, m.vocab_size, m.max_query_len, m.max_passage_len)
        self.data = data
        self.out = Path(out_dir) if out_dir is not None else None
        self.threads = threads
        self.records: list[dict] = []
        self.train_ids = data.query_ids("train")
        if not self.train_ids:
            raise ValueError("no training queries")

    def seed(self, tag: str) -> int:
        return derive_seed(self.cfg.seed, tag) % (2 ** 63)

    def hyper(self, steps, lr, batch, warmup, tag) -> TrainHyper:
        return TrainHyper(steps, lr, batch, warmup, self.seed(tag), self.cfg.optim)

    def evaluate(self, student, tag: str) -> dict[str, float]:
        values, runs = evaluate_student(student, self.data, self.cfg.eval.split, self.cfg.eval.depth, self.threads)
        if self.out is not None:
            (self.out / tag).mkdir(parents=True, exist_ok=True)
            write_run(self.out / tag / f"{self.cfg.eval.split}.trec", runs, tag=tag)
        return values

    def record(self, **rec) -> None:
        self.records.append(rec)
        log.info("%s", json.dumps(rec, sort_keys=True))

    def save(self, tag: str, **models) -> None:
        if self.out is None:
            return
        for name, m in models.items():
            save_checkpoint(m, self.out / tag / f"{name}.ckpt")

    # -- warm-up

    def warmup(self) -> tuple[DualEncoder, DualEncoder]:
        cfg, w = self.cfg, self.cfg.warmup
        student = DualEncoder(cfg.model.encoder(cfg.model.student_layers, self.seed("init/student")))
        teacher = DualEncoder(cfg.model.encoder(w.teacher_layers, self.seed("init/teacher0")))
        groups = random_negative_groups(self.data, self.train_ids, w.negatives_per_query, self.seed("warmup/random"))
        step_fn = lambda m: (lambda batch, _: listwise_loss(m, extend_in_batch(batch)))
        train_loop(teacher, groups, self.hyper(w.steps, w.learning_rate, w.batch_size, w.warmup_ratio,
                                               "warmup/teacher"), step_fn(teacher), "warmup-teacher")
        train_loop(student, groups, self.hyper(w.steps, w.learning_rate, w.batch_size, w.warmup_ratio,
                                               "warmup/student"), step_fn(student), "warmup-student")
        if w.retrain_steps > 0:
            mined = mine_hard_negatives(teacher, self.data, self.train_ids,
                                        cfg.mining_config(w.negatives_per_query, self.seed("warmup/mine")),
                                        self.threads)
            train_loop(teacher, mined.groups, self.hyper(w.retrain_steps, w.learning_rate, w.batch_size,
                                                         w.warmup_ratio, "warmup/retrain"),
                       step_fn(teacher), "warmup-retrain")
        metrics = self.evaluate(student, "warmup")
        self.record(event="pure_student", stage=0, name="pure", metrics=metrics)
        self.save("warmup", student=student, teacher=teacher)
        return teacher, student

    # -- teacher progressive distillation

    def run_stage(self, index: int, spec: StageSpec, student: DualEncoder, teacher0: DualEncoder | None):
        mined = mine_hard_negatives(student, self.data, self.train_ids,
                                    self.cfg.mining_config(spec.negatives_per_query, self.seed(f"stage{index}/mine")),
                                    self.threads)
        t_hyper = self.hyper(spec.teacher_steps, spec.teacher_learning_rate, spec.teacher_batch_size,
                             spec.warmup_ratio, f"stage{index}/teacher")
        init = None
        if spec.teacher_kind == "dual_encoder" and teacher0 is not None \
                and teacher0.config.num_layers == spec.teacher_layers:
            init = teacher0
        embed_from = teacher0 if self.cfg.model.teacher_embed_init and init is None else None
        teacher, t_hist = train_teacher(spec.teacher_kind, spec.teacher_layers, mined.groups, t_hyper,
                                        self.cfg.model, init=init, seed=self.seed(f"init/stage{index}/teacher"),
                                        embed_from=embed_from)
        frozen = FrozenSnapshot.capture(student, f"stage{index}") if spec.use_regularization else None
        telemetry: list = []
        hyper = self.hyper(spec.steps, spec.learning_rate, spec.batch_size, spec.warmup_ratio,
                           f"stage{index}/distill")
        new_student = distill_stage(student, teacher, mined.groups, spec, frozen, hyper, telemetry)
        metrics = self.evaluate(new_student, f"stage{index}")
        self.record(event="stage", stage=index, name=spec.label, steps=spec.steps, groups=len(mined.groups),
                    teacher_final_loss=t_hist[-1] if t_hist else None,
                    final_loss=telemetry[-1]["loss"] if telemetry else None, metrics=metrics)
        self.save(f"stage{index}", student=new_student, teacher=teacher)
        if self.out is not None:
            write_groups(self.out / f"stage{index}" / "groups.tsv", mined.groups)
        return new_student, teacher

    def run_tpd(self, student: DualEncoder, teacher0: DualEncoder | None = None):
        teachers = []
        for i, spec in enumerate(self.cfg.stages, 1):
            student, teacher = self.run_stage(i, spec, student, teacher0)
            teachers.append(teacher)
        return student, teachers

    # -- data progressive distillation

    def run_dpd(self, student: DualEncoder, ce_teacher: CrossEncoder, gamma: float | None = None,
                tag: str = "dpd") -> DualEncoder:
        d = self.cfg.dpd
        if gamma is not None:
            d = replace(d, gamma=gamma)
        spec = StageSpec(teacher_kind="cross_encoder", teacher_layers=ce_teacher.config.num_layers,
                         negatives_per_query=d.negatives_per_query, alpha=d.alpha, beta=d.beta, gamma=d.gamma,
                         tau=d.tau, steps=d.steps, learning_rate=d.learning_rate, batch_size=d.batch_size,
                         warmup_ratio=d.warmup_ratio, use_in_batch=False, use_regularization=d.gamma > 0)
        filt = d.filter
        teacher = ce_teacher
        for it in range(1, d.iterations + 1):
            mined = mine_hard_negatives(student, self.data, self.train_ids,
                                        self.cfg.mining_config(d.negatives_per_query, self.seed(f"{tag}{it}/mine")),
                                        self.threads)
            excludes = {q: relevant_ids(self.data.qrels, q) for q in self.train_ids}
            ranks = positive_ranks_batch(student, teacher, mined.groups, mined.retrievals, excludes, self.data)
            selected = select_confusing_queries(ranks, mined.groups, filt, it)
            if len(selected) == 0:
                self.record(event="dpd", iteration=it, tag=tag, selected=0, counters=dict(selected.counters),
                            stopped="empty selection")
                break
            steps = math.ceil(d.teacher_epochs * len(selected) / d.batch_size)
            teacher, _ = train_teacher("cross_encoder", teacher.config.num_layers, selected.groups,
                                       self.hyper(steps, d.teacher_learning_rate, d.batch_size, d.warmup_ratio,
                                                  f"{tag}{it}/teacher"), init=teacher)
            frozen = FrozenSnapshot.capture(student, f"{tag}{it}") if spec.use_regularization else None
            student = distill_stage(student, teacher, selected.groups, spec, frozen,
                                    self.hyper(d.steps, d.learning_rate, d.batch_size, d.warmup_ratio,
                                               f"{tag}{it}/distill"))
            metrics = self.evaluate(student, f"{tag}{it}")
            self.record(event="dpd", iteration=it, tag=tag, selected=len(selected), teacher_steps=steps,
                        gamma=d.gamma, counters=dict(selected.counters), metrics=metrics)
            self.save(f"{tag}{it}", student=student, teacher=teacher)
            if self.out is not None:
                write_groups(self.out / f"{tag}{it}" / "groups.tsv", selected.groups)
        return student

    def run(self) -> PipelineResult:
        teacher0, student0 = self.warmup()
        tpd_student, teachers = self.run_tpd(student0, teacher0)
        student = tpd_student
        if self.cfg.dpd.iterations > 0:
            student = self.run_dpd(tpd_student, teachers[-1])
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(student, self.out / "final_student.ckpt")
        result = PipelineResult(student, student0, tpd_student, teachers, self.records)
        if self.out is not None:
            (self.out / "report.jsonl").write_text(result.report_text(), encoding="utf-8")
        return result


def run_pipeline(cfg: PipelineConfig, data, out_dir=None, threads: int = 1) -> PipelineResult:
    return Runner(cfg, data, out_dir, threads).run()


def run_tpd(cfg: PipelineConfig, data, student: DualEncoder, teacher0: DualEncoder | None = None,
            out_dir=None, threads: int = 1):
    runner = Runner(cfg, data, out_dir, threads)
    student, teachers = runner.run_tpd(student, teacher0)
    return student, teachers, runner.records


def run_dpd(student: DualEncoder, ce_teacher: CrossEncoder, cfg: PipelineConfig, data, out_dir=None,
            threads: int = 1, gamma: float | None = None):
    runner = Runner(cfg, data, out_dir, threads)
    return runner.run_dpd(student, ce_teacher, gamma=gamma), runner.records


def warmup(cfg: PipelineConfig, data, out_dir=None, threads: int = 1) -> tuple[DualEncoder, DualEncoder]:
    return Runner(cfg, data, out_dir, threads).warmup()

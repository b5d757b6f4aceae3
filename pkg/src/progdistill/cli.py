"""Command-line entry point: ``progdistill <command> [flags]``.

Results go to stdout or ``--out`` files; progress goes to stderr.
Exit codes: 0 success, 1 usage error, 2 data/config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import PipelineConfig, dump_config, load_config, stage_template, validate
from .data import DataError, Prepared, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .encoders import CheckpointError, load_checkpoint, save_checkpoint
from .losses import ConfigError, LossWeights
from .metrics import evaluate as evaluate_runs
from .metrics import parse_metric
from .mining import mine_hard_negatives, read_groups, write_groups
from .pipeline import (FrozenSnapshot, Runner, TrainHyper, distill_stage, evaluate_student,
                       multi_teacher_baseline, train_teacher)
from .retrieval import read_qrels, read_run, write_run

log = logging.getLogger("progdistill")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


# ---------------------------------------------------------------- helpers


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else validate(PipelineConfig())
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _prepared(args, cfg: PipelineConfig) -> Prepared:
    m = cfg.model
    return Prepared(load_dataset(args.data), m.vocab_size, m.max_query_len, m.max_passage_len)


def _load(path, kind=None):
    model = load_checkpoint(path)
    if kind is not None and model.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {model.kind}")
    return model


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(num_clusters=args.clusters, passages_per_cluster=args.passages_per_cluster,
                         queries_per_cluster=args.queries_per_cluster,
                         vocab_tokens_per_cluster=args.vocab_per_cluster, noise_token_rate=args.noise,
                         seed=args.seed if args.seed is not None else SyntheticSpec.seed)
    ds = generate_synthetic(spec)
    save_dataset(args.out, ds)
    _emit({"passages": len(ds.corpus), **{f"queries_{s}": len(q) for s, q in ds.queries.items()}})
    return 0


def cmd_effective_config(args) -> int:
    sys.stdout.write(dump_config(_config(args)))
    return 0


def cmd_warmup(args) -> int:
    cfg = _config(args)
    runner = Runner(cfg, _prepared(args, cfg), args.out, args.threads)
    runner.warmup()
    _emit(runner.records[-1])
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    data = _prepared(args, cfg)
    groups = read_groups(args.groups, data)
    init = _load(args.init, args.kind) if args.init else None
    embed_from = _load(args.embed_from, "dual_encoder") if args.embed_from else None
    hyper = TrainHyper(args.steps, args.lr, args.batch_size, args.warmup_ratio, cfg.seed, cfg.optim)
    teacher, history = train_teacher(args.kind, args.layers, groups, hyper, cfg.model, init=init,
                                     seed=cfg.seed, embed_from=embed_from)
    save_checkpoint(teacher, args.out)
    _emit({"kind": args.kind, "steps": len(history), "final_loss": history[-1] if history else None})
    return 0


def cmd_mine(args) -> int:
    cfg = _config(args)
    data = _prepared(args, cfg)
    student = _load(args.student, "dual_encoder")
    mcfg = cfg.mining_config(args.negatives, cfg.seed)
    if args.depth is not None:
        mcfg = replace(mcfg, depth_k=args.depth)
    result = mine_hard_negatives(student, data, data.query_ids(args.split), mcfg, args.threads)
    write_groups(args.out, result.groups)
    _emit({"groups": len(result.groups), "counters": dict(result.counters)})
    return 0


def cmd_distill(args) -> int:
    cfg = _config(args)
    data = _prepared(args, cfg)
    if not 1 <= args.stage <= len(cfg.stages):
        raise ConfigError(f"--stage must lie in 1..{len(cfg.stages)}")
    spec = cfg.stages[args.stage - 1]
    student = _load(args.student, "dual_encoder")
    teacher = _load(args.teacher, spec.teacher_kind)
    groups = read_groups(args.groups, data)
    frozen = FrozenSnapshot.capture(student, f"stage{args.stage}") if spec.use_regularization else None
    hyper = TrainHyper(spec.steps, spec.learning_rate, spec.batch_size, spec.warmup_ratio, cfg.seed, cfg.optim)
    telemetry: list = []
    out = distill_stage(student, teacher, groups, spec, frozen, hyper, telemetry)
    save_checkpoint(out, args.out)
    metrics, _ = evaluate_student(out, data, cfg.eval.split, cfg.eval.depth, args.threads)
    _emit({"stage": args.stage, "name": spec.label, "steps": len(telemetry),
           "final_loss": telemetry[-1]["loss"] if telemetry else None, "metrics": metrics})
    return 0


def cmd_dpd(args) -> int:
    cfg = _config(args)
    runner = Runner(cfg, _prepared(args, cfg), args.out, args.threads)
    student = _load(args.student, "dual_encoder")
    teacher = _load(args.teacher, "cross_encoder")
    final = runner.run_dpd(student, teacher, gamma=args.gamma)
    if args.out:
        save_checkpoint(final, Path(args.out) / "final_student.ckpt")
    for rec in runner.records:
        _emit(rec)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    result = Runner(cfg, load_dataset(args.data), args.out, args.threads).run()
    sys.stdout.write(result.report_text())
    return 0


def cmd_evaluate(args) -> int:
    specs = args.metric or ["mrr@10"]
    for s in specs:
        parse_metric(s)
    if args.run:
        if not args.qrels:
            raise UsageError("evaluate: --run needs --qrels")
        values = evaluate_runs(read_run(args.run), read_qrels(args.qrels), specs)
    else:
        if not (args.student and args.data):
            raise UsageError("evaluate: give either --run/--qrels or --student/--data")
        cfg = _config(args)
        data = _prepared(args, cfg)
        values, runs = evaluate_student(_load(args.student, "dual_encoder"), data, args.split,
                                        args.depth, args.threads, specs)
        if args.write_run:
            write_run(args.write_run, runs)
    if len(specs) == 1 and not args.json:
        print(f"{values[specs[0]]:.6f}")
    else:
        _emit(values)
    return 0


def cmd_baseline(args) -> int:
    cfg = _config(args)
    data = _prepared(args, cfg)
    student = _load(args.student, "dual_encoder")
    teachers = [_load(p) for p in args.teacher]
    groups = read_groups(args.groups, data)
    spec = cfg.stages[-1]
    weights = LossWeights(spec.alpha, spec.beta, 0.0, spec.tau)
    hyper = TrainHyper(spec.steps, spec.learning_rate, spec.batch_size, spec.warmup_ratio, cfg.seed, cfg.optim)
    out = multi_teacher_baseline(args.strategy, teachers, student, groups, weights, hyper)
    save_checkpoint(out, args.out)
    metrics, _ = evaluate_student(out, data, cfg.eval.split, cfg.eval.depth, args.threads)
    _emit({"strategy": args.strategy, "teachers": len(teachers), "metrics": metrics})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the command; SUPPRESS keeps a
    # subcommand's unset copy from overwriting a value given up front
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help=f"worker threads (default: {_default_threads()})")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override the config seed (default: config value)")
    common.add_argument("--log-level", default=argparse.SUPPRESS, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="stderr log level (default: WARNING)")

    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="progdistill", description="Progressive distillation for dense retrieval.",
                     parents=[common], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, parents=[common], formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    def with_config(p, data=True):
        p.add_argument("--config", default=None, help="flat key = value config file")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    p = add("gen-synthetic", cmd_gen_synthetic, "write the synthetic clustered benchmark")
    d = SyntheticSpec()
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--clusters", type=int, default=d.num_clusters)
    p.add_argument("--passages-per-cluster", type=int, default=d.passages_per_cluster)
    p.add_argument("--queries-per-cluster", type=int, default=d.queries_per_cluster)
    p.add_argument("--vocab-per-cluster", type=int, default=d.vocab_tokens_per_cluster)
    p.add_argument("--noise", type=float, default=d.noise_token_rate)

    p = add("effective-config", cmd_effective_config, "print every resolved config key")
    with_config(p, data=False)

    p = add("warmup", cmd_warmup, "train the warm-up teacher and student")
    with_config(p)
    p.add_argument("--out", required=True, help="run directory for checkpoints")

    p = add("train-teacher", cmd_train_teacher, "train a teacher on mined groups")
    with_config(p)
    p.add_argument("--groups", required=True, help="mined groups file")
    p.add_argument("--kind", choices=["dual_encoder", "cross_encoder"], default="cross_encoder")
    p.add_argument("--layers", type=int, default=stage_template(2).teacher_layers)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=stage_template(2).teacher_learning_rate)
    p.add_argument("--batch-size", type=int, default=stage_template(2).teacher_batch_size)
    p.add_argument("--warmup-ratio", type=float, default=0.1)
    p.add_argument("--init", default=None, help="checkpoint to continue training")
    p.add_argument("--embed-from", default=None, help="dual-encoder checkpoint to seed token embeddings")
    p.add_argument("--out", required=True, help="output checkpoint")

    p = add("mine", cmd_mine, "mine hard negatives with a student")
    with_config(p)
    p.add_argument("--student", required=True)
    p.add_argument("--split", default="train", choices=["train", "dev", "test"])
    p.add_argument("--negatives", type=int, default=stage_template(2).negatives_per_query)
    p.add_argument("--depth", type=int, default=None, help="retrieval depth (default: mining.depth_k)")
    p.add_argument("--out", required=True, help="output groups file")

    p = add("distill", cmd_distill, "run one distillation stage")
    with_config(p)
    p.add_argument("--stage", type=int, required=True, help="1-based stage index in the config")
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--out", required=True, help="output student checkpoint")

    p = add("dpd", cmd_dpd, "run confusing-data iterations after the teacher stages")
    with_config(p)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True, help="final cross-encoder teacher")
    p.add_argument("--gamma", type=float, default=None, help="override dpd.gamma")
    p.add_argument("--out", default=None, help="run directory")

    p = add("pipeline", cmd_pipeline, "warm-up, every teacher stage, then confusing-data iterations")
    with_config(p)
    p.add_argument("--out", default=None, help="run directory (report.jsonl, checkpoints, runs)")

    p = add("evaluate", cmd_evaluate, "score a TREC run file or a student checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--run", default=None, help="TREC run file")
    p.add_argument("--qrels", default=None, help="TREC qrels file")
    p.add_argument("--student", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="dev", choices=["train", "dev", "test"])
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--metric", action="append", help="e.g. mrr@10, recall@50, ndcg@10, map@1000 (repeatable)")
    p.add_argument("--write-run", default=None, help="also write the student's run file")
    p.add_argument("--json", action="store_true", help="print a JSON object even for one metric")

    p = add("baseline", cmd_baseline, "multi-teacher distillation baseline")
    with_config(p)
    p.add_argument("--strategy", required=True, choices=["random_batch", "merge_score", "merge_loss"])
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True, action="append", help="teacher checkpoint (repeatable)")
    p.add_argument("--groups", required=True)
    p.add_argument("--out", required=True)
    return parser


_GLOBAL_DEFAULTS = {"threads": _default_threads, "seed": None, "log_level": "WARNING"}


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            parser.print_help(sys.stderr)
            return 1
        args = parser.parse_args(argv)
        for key, value in _GLOBAL_DEFAULTS.items():
            if not hasattr(args, key):
                setattr(args, key, value() if callable(value) else value)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=args.log_level, stream=sys.stderr,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, DataError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

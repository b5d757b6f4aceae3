"""Pipeline configuration: dataclasses plus a flat ``section.key = value`` file format.

Missing keys take the full-scale defaults below; desk-scale runs override
them (see ``configs/synthetic.cfg``). ``dump_config``
writes every resolved key, and loading that dump reproduces the config.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .encoders import EncoderConfig
from .losses import ConfigError, LossWeights
from .mining import ConfusionFilter, MiningConfig
from .optim import OptimConfig

KINDS = ("dual_encoder", "cross_encoder")


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int = 4096
    hidden_dim: int = 32
    max_query_len: int = 32
    max_passage_len: int = 144
    share_towers: bool = False
    init_scale: float = 0.5
    student_layers: int = 6
    teacher_embed_init: bool = False

    def encoder(self, layers: int, seed: int) -> EncoderConfig:
        return EncoderConfig(num_layers=layers, hidden_dim=self.hidden_dim, vocab_size=self.vocab_size,
                             max_query_len=self.max_query_len, max_passage_len=self.max_passage_len,
                             seed=seed, share_towers=self.share_towers, init_scale=self.init_scale)


@dataclass(frozen=True)
class WarmupSpec:
    teacher_layers: int = 12
    steps: int = 40000
    retrain_steps: int = 40000
    learning_rate: float = 5e-5
    batch_size: int = 128
    negatives_per_query: int = 1
    warmup_ratio: float = 0.1


@dataclass(frozen=True)
class StageSpec:
    teacher_kind: str = "dual_encoder"
    teacher_layers: int = 12
    negatives_per_query: int = 1
    alpha: float = 0.1
    beta: float = 0.9
    gamma: float = 0.0
    tau: float = 4.0
    steps: int = 40000
    learning_rate: float = 5e-5
    batch_size: int = 128
    warmup_ratio: float = 0.1
    use_in_batch: bool = True
    use_regularization: bool = False
    teacher_steps: int = 40000
    teacher_learning_rate: float = 5e-5
    teacher_batch_size: int = 64

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.tau)

    @property
    def label(self) -> str:
        return f"{self.teacher_layers}{'DE' if self.teacher_kind == 'dual_encoder' else 'CE'}"


DE_STAGE = StageSpec()
CE_STAGE = StageSpec(teacher_kind="cross_encoder", negatives_per_query=15, gamma=0.1, batch_size=64,
                     use_in_batch=False, use_regularization=True)
DEFAULT_STAGES = (DE_STAGE, replace(CE_STAGE, teacher_layers=12), replace(CE_STAGE, teacher_layers=24))


def stage_template(index: int) -> StageSpec:
    """Default for the 1-based stage ``index``: 12DE, 12CE, then 24CE onward."""
    return DEFAULT_STAGES[min(index, len(DEFAULT_STAGES)) - 1]


@dataclass(frozen=True)
class DPDSpec:
    iterations: int = 1
    kprime: int = 15
    learning_rate: float = 1e-5
    batch_size: int = 64
    steps: int = 2000
    negatives_per_query: int = 15
    warmup_ratio: float = 0.1
    alpha: float = 0.1
    beta: float = 0.9
    gamma: float = 0.1
    tau: float = 4.0
    teacher_epochs: int = 2
    teacher_learning_rate: float = 1e-5
    filter_mode: str = "window_intersection"
    filter_student_lo: int = 1
    filter_teacher_lo: int = 0
    filter_teacher_hi: int = 1

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.tau)

    @property
    def filter(self) -> ConfusionFilter:
        return ConfusionFilter((self.filter_student_lo, self.kprime),
                               (self.filter_teacher_lo, self.filter_teacher_hi), self.filter_mode)


@dataclass(frozen=True)
class MiningSpec:
    depth_k: int = 100
    answer_filter: bool = False


@dataclass(frozen=True)
class EvalSpec:
    split: str = "dev"
    depth: int = 100


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 13
    model: ModelSpec = field(default_factory=ModelSpec)
    warmup: WarmupSpec = field(default_factory=WarmupSpec)
    stages: tuple[StageSpec, ...] = DEFAULT_STAGES
    dpd: DPDSpec = field(default_factory=DPDSpec)
    mining: MiningSpec = field(default_factory=MiningSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    allow_nonprogressive: bool = False

    @property
    def dpd_iterations(self) -> int:
        return self.dpd.iterations

    @property
    def dpd_kprime(self) -> int:
        return self.dpd.kprime

    @property
    def dpd_filter(self) -> ConfusionFilter:
        return self.dpd.filter

    def mining_config(self, sample_m: int, seed: int) -> MiningConfig:
        return MiningConfig(self.mining.depth_k, sample_m, seed, self.mining.answer_filter)


# ---------------------------------------------------------------- validation


def validate(cfg: PipelineConfig) -> PipelineConfig:
    """Raise :class:`ConfigError` naming the first violated rule."""
    if not cfg.stages:
        raise ConfigError("at least one stage is required")
    seen_ce = False
    last_layers: dict[str, int] = {}
    for i, st in enumerate(cfg.stages, 1):
        where = f"stage{i}"
        if st.teacher_kind not in KINDS:
            raise ConfigError(f"{where}.teacher_kind must be one of {KINDS}")
        try:
            st.weights
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        for name in ("teacher_layers", "negatives_per_query", "batch_size", "teacher_batch_size"):
            if getattr(st, name) < 1:
                raise ConfigError(f"{where}.{name} must be >= 1")
        if st.steps < 0 or st.teacher_steps < 0:
            raise ConfigError(f"{where}: step counts must be >= 0")
        if not 0 <= st.warmup_ratio < 1:
            raise ConfigError(f"{where}.warmup_ratio must lie in [0, 1)")
        if st.negatives_per_query > cfg.mining.depth_k:
            raise ConfigError(f"{where}.negatives_per_query exceeds mining.depth_k")
        if st.teacher_kind == "dual_encoder":
            if st.use_regularization or st.gamma != 0:
                raise ConfigError(f"{where}: dual-encoder stages take no regularization (gamma must be 0)")
        else:
            if st.use_in_batch:
                raise ConfigError(f"{where}: cross-encoder stages use mined hard negatives only (use_in_batch = false)")
        if st.gamma > 0 and not st.use_regularization:
            raise ConfigError(f"{where}: gamma > 0 needs use_regularization = true")
        if not cfg.allow_nonprogressive:
            if st.teacher_kind == "dual_encoder" and seen_ce:
                raise ConfigError(f"{where}: dual-encoder teacher after a cross-encoder teacher "
                                  "(set pipeline.allow_nonprogressive = true to override)")
            prev = last_layers.get(st.teacher_kind)
            if prev is not None and st.teacher_layers < prev:
                raise ConfigError(f"{where}: teacher_layers {st.teacher_layers} < previous {prev} for "
                                  f"{st.teacher_kind} (set pipeline.allow_nonprogressive = true to override)")
        seen_ce = seen_ce or st.teacher_kind == "cross_encoder"
        last_layers[st.teacher_kind] = st.teacher_layers
    d = cfg.dpd
    if d.iterations < 0:
        raise ConfigError("dpd.iterations must be >= 0")
    if d.iterations > 0 and cfg.stages[-1].teacher_kind != "cross_encoder":
        raise ConfigError("dpd needs the final stage to use a cross-encoder teacher")
    try:
        d.filter
        d.weights
    except ValueError as exc:
        raise ConfigError(f"dpd: {exc}") from None
    if d.negatives_per_query > cfg.mining.depth_k:
        raise ConfigError("dpd.negatives_per_query exceeds mining.depth_k")
    if cfg.eval.split not in ("train", "dev", "test"):
        raise ConfigError("eval.split must be train, dev or test")
    for name in ("student_layers", "hidden_dim", "max_query_len", "max_passage_len"):
        if getattr(cfg.model, name) < 1:
            raise ConfigError(f"model.{name} must be >= 1")
    return cfg


# ---------------------------------------------------------------- flat format


def _parse_value(raw: str, like, key: str):
    raw = raw.strip()
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_SECTIONS = {"model": ModelSpec, "warmup": WarmupSpec, "dpd": DPDSpec, "mining": MiningSpec,
             "optim": OptimConfig, "eval": EvalSpec}


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    entries: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        entries[key] = (value.strip(), lineno)

    def take(key, like):
        raw, lineno = entries.pop(key)
        return _parse_value(raw, like, f"{source}:{lineno}: {key}")

    top = {}
    if "seed" in entries:
        top["seed"] = take("seed", 0)
    if "pipeline.allow_nonprogressive" in entries:
        top["allow_nonprogressive"] = take("pipeline.allow_nonprogressive", False)
    num_stages = take("pipeline.num_stages", 0) if "pipeline.num_stages" in entries else len(DEFAULT_STAGES)
    if num_stages < 1:
        raise ConfigError(f"{source}: pipeline.num_stages must be >= 1")

    for section, cls in _SECTIONS.items():
        base = cls()
        updates = {}
        for f in dataclasses.fields(cls):
            key = f"{section}.{f.name}"
            if key in entries:
                updates[f.name] = take(key, getattr(base, f.name))
        top[section] = replace(base, **updates)

    stages = []
    for i in range(1, num_stages + 1):
        base = stage_template(i)
        updates = {}
        for f in dataclasses.fields(StageSpec):
            key = f"stage{i}.{f.name}"
            if key in entries:
                updates[f.name] = take(key, getattr(base, f.name))
        stages.append(replace(base, **updates))
    top["stages"] = tuple(stages)

    if entries:
        key, (_, lineno) = next(iter(entries.items()))
        raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    return validate(PipelineConfig(**top))


def load_config(path: str | Path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def dump_config(cfg: PipelineConfig) -> str:
    """Every resolved key, one per line; ``parse_config`` inverts it."""
    lines = [f"seed = {cfg.seed}",
             f"pipeline.allow_nonprogressive = {_format_value(cfg.allow_nonprogressive)}",
             f"pipeline.num_stages = {len(cfg.stages)}"]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    for i, st in enumerate(cfg.stages, 1):
        for f in dataclasses.fields(st):
            lines.append(f"stage{i}.{f.name} = {_format_value(getattr(st, f.name))}")
    return "\n".join(lines) + "\n"

from dataclasses import replace

import pytest

from progdistill.config import (ConfigError, PipelineConfig, dump_config, load_config, parse_config, stage_template,
                                validate)


def test_defaults_validate():
    cfg = validate(PipelineConfig())
    assert [s.label for s in cfg.stages] == ["12DE", "12CE", "24CE"]
    assert cfg.dpd.gamma == 0.1 and cfg.dpd.kprime == 15
    assert cfg.dpd.filter.student_window == (1, 15) and cfg.dpd.filter.teacher_window == (0, 1)


def test_empty_text_gives_defaults():
    assert parse_config("") == PipelineConfig()


def test_dump_parse_round_trip():
    cfg = load_config("configs/synthetic.cfg")
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(PipelineConfig())) == PipelineConfig()


def test_stage_keys_and_templates():
    cfg = parse_config("pipeline.num_stages = 4\nstage4.teacher_layers = 30\nstage2.gamma = 0.3\n")
    assert len(cfg.stages) == 4
    assert cfg.stages[3].teacher_kind == "cross_encoder" and cfg.stages[3].teacher_layers == 30
    assert cfg.stages[1].gamma == 0.3
    assert stage_template(9) == stage_template(3)


@pytest.mark.parametrize("text,match", [
    ("seed 3", "key = value"),
    ("seed = 1\nseed = 2", "duplicate"),
    ("model.colour = red", "unknown key"),
    ("pipeline.num_stages = 1\nstage2.steps = 5", "unknown key"),
    ("seed = abc", "cannot parse"),
    ("model.share_towers = maybe", "boolean"),
    ("pipeline.num_stages = 0", "num_stages"),
])
def test_parse_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


@pytest.mark.parametrize("text,match", [
    ("stage1.gamma = 0.1\nstage1.use_regularization = true", "gamma must be 0"),
    ("stage2.use_in_batch = true", "hard negatives only"),
    ("stage2.use_regularization = false", "use_regularization"),
    ("stage3.teacher_layers = 6", "teacher_layers"),
    ("stage2.teacher_kind = bert", "teacher_kind"),
    ("stage1.tau = 0", "tau"),
    ("stage2.negatives_per_query = 500", "depth_k"),
    ("stage3.teacher_kind = dual_encoder\nstage3.gamma = 0\nstage3.use_regularization = false\n"
     "stage3.use_in_batch = true", "dual-encoder teacher after"),
    ("eval.split = holdout", "eval.split"),
    ("dpd.iterations = -1", "iterations"),
])
def test_validation_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_nonprogressive_escape_hatch():
    cfg = parse_config("pipeline.allow_nonprogressive = true\nstage3.teacher_layers = 6")
    assert cfg.stages[2].teacher_layers == 6


def test_dpd_requires_ce_final_stage():
    with pytest.raises(ConfigError, match="dpd"):
        validate(replace(PipelineConfig(), stages=(stage_template(1),)))
    validate(replace(PipelineConfig(), stages=(stage_template(1),), dpd=replace(PipelineConfig().dpd, iterations=0)))

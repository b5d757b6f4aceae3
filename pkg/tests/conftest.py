import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from progdistill.data import Prepared, SyntheticSpec, generate_synthetic  # noqa: E402
from progdistill.encoders import EncoderConfig, tokenize  # noqa: E402

# small end-to-end config used by the pipeline and CLI tests
TINY = """
seed = 5
model.vocab_size = 256
model.hidden_dim = 8
model.max_query_len = 8
model.max_passage_len = 24
model.student_layers = 1
model.share_towers = true
model.teacher_embed_init = true
warmup.teacher_layers = 1
warmup.steps = 30
warmup.retrain_steps = 5
warmup.learning_rate = 0.01
warmup.batch_size = 8
mining.depth_k = 40
stage1.teacher_layers = 1
stage1.steps = 10
stage1.learning_rate = 0.005
stage1.batch_size = 8
stage1.teacher_steps = 0
stage2.teacher_layers = 1
stage2.negatives_per_query = 4
stage2.steps = 10
stage2.learning_rate = 0.005
stage2.batch_size = 8
stage2.teacher_steps = 20
stage2.teacher_learning_rate = 0.01
stage2.teacher_batch_size = 8
stage3.teacher_layers = 2
stage3.negatives_per_query = 4
stage3.steps = 10
stage3.learning_rate = 0.005
stage3.batch_size = 8
stage3.teacher_steps = 20
stage3.teacher_learning_rate = 0.01
stage3.teacher_batch_size = 8
dpd.kprime = 30
dpd.negatives_per_query = 4
dpd.steps = 5
dpd.learning_rate = 0.001
dpd.batch_size = 8
dpd.teacher_learning_rate = 0.001
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(SyntheticSpec(num_clusters=4, passages_per_cluster=30, queries_per_cluster=10,
                                            vocab_tokens_per_cluster=12, seed=3))


@pytest.fixture(scope="session")
def small_data(small_ds):
    return Prepared(small_ds, vocab_size=256, max_query_len=8, max_passage_len=24)


@pytest.fixture
def toy_cfg():
    return EncoderConfig(num_layers=2, hidden_dim=6, vocab_size=40, max_query_len=6, max_passage_len=8, seed=0)


def toks(text, n=8, vocab=40):
    return tokenize(text, n, vocab)


def group(qid="q", query="a b", pos="a b c", negs=("d e", "f g h", "i"), **kw):
    from progdistill.losses import CandidateGroup
    return CandidateGroup.build(qid, toks(query), qid + "+", toks(pos),
                                [(f"{qid}-{i}", toks(t)) for i, t in enumerate(negs)], **kw)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    num, title = mark.args
    ok, names = _CRITERIA.get(num, (True, title))
    _CRITERIA[num] = (ok and rep.passed and not rep.skipped, names)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        ok, title = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num} {'PASS' if ok else 'FAIL'}: {title}")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_OVERRIDES = dict(model_dim=16, heads=2, ffn_dim=32, n_mt=48, n_asr=32, n_st=24, n_dev=8, n_test=6,
                      mt_max_epochs=2, asr_max_epochs=2, st_max_epochs=3, batch_size=8, lr=3e-3,
                      warmup_freeze_steps=3, beta_interval_steps=2, checkpoint_average_k=2, max_decode_len=6)


@pytest.fixture(scope="session")
def tiny_config():
    from mspst.pipeline import PipelineConfig
    return PipelineConfig(**TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_config):
    from mspst.data import gen_corpus
    return gen_corpus(tiny_config.task_spec, tiny_config.data_seed)


@pytest.fixture(scope="session")
def tiny_run(tiny_config, tiny_corpus, tmp_path_factory):
    from mspst.pipeline import run_pipeline
    out = tmp_path_factory.mktemp("tiny_run")
    return run_pipeline(tiny_config, tiny_corpus, out), out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

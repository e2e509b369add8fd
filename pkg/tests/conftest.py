import pytest

from spectune.config import ExperimentConfig, set_key
from spectune.data import gen_synthetic
from spectune.train import clear_cache, run_pretrain

TINY = {
    "dataset.train_per_class": 12,
    "dataset.test_per_class": 6,
    "dataset.points": 64,
    "model.n": 8,
    "model.g": 4,
    "model.d": 8,
    "model.embed_hidden": 8,
    "adapter.r": 2,
    "ordering.k": 2,
    "optim.epochs": 3,
    "optim.pretrain_epochs": 3,
    "optim.batch_size": 8,
}


def tiny_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for k, v in {**TINY, **overrides}.items():
        set_key(cfg, k, v)
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_cfg):
    return gen_synthetic(tiny_cfg, tmp_path_factory.mktemp("tiny_data"))


@pytest.fixture(scope="session")
def tiny_pretrained(tmp_path_factory, tiny_cfg, tiny_data):
    out = tmp_path_factory.mktemp("tiny_pre")
    ck, records = run_pretrain(tiny_cfg, tiny_data, out)
    return ck, records, out


@pytest.fixture(autouse=True)
def _fresh_cache():
    yield
    clear_cache()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import pytest

from adamcu.config import RunConfig, parse_config

SMALL_CONFIG = """
seed = 3
scene.height = 16
scene.width = 16
data.n_source = 8
data.n_target = 6
data.n_val = 4
net.hidden = 8
net.depth = 2
net.embed_dim = 4
sampler.k_batch = 8
train.epochs = 3
train.pretrain_epochs = 20
train.lr = 0.01
train.pretrain_lr = 0.1
"""


def small_config(**overrides) -> RunConfig:
    cfg = parse_config(SMALL_CONFIG)
    for k, v in overrides.items():
        parse_config(f"{k.replace('__', '.')} = {v}", cfg)
    cfg.validate()
    return cfg


@pytest.fixture
def small_cfg():
    return small_config()


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

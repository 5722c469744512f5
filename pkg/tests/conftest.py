import pytest

from kdwb.data import build_vocab, gen_synthetic
from kdwb.model import ModelConfig
from kdwb.training import RunConfig, train_teacher


@pytest.fixture(scope="session")
def pair_task():
    train = gen_synthetic("separable_pair", 400, 0, "train")
    dev = gen_synthetic("separable_pair", 200, 1, "dev")
    return train, dev, build_vocab(train)


@pytest.fixture(scope="session")
def small_teacher(pair_task):
    """2L/2AH/32D teacher fitted to separable_pair; a raised lr keeps this to seconds."""
    train, dev, vocab = pair_task
    cfg = ModelConfig(2, 2, 32, vocab_size=len(vocab), max_positions=64)
    model, log = train_teacher(cfg, train, RunConfig(epochs=10, lr=1e-3, max_len=64), vocab=vocab, dev=dev)
    return model, log


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)

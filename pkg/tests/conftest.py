import numpy as np
import pytest

from scalpel import tensor as T
from scalpel.lora import init_adapters
from scalpel.model import ModelConfig, Tokenizer, TransformerModel

ALPHABET = "abcdefghijklmnopqrstuvwxyzABDEFGHJKLMNPRST0123456789 .:;=+%>"


@pytest.fixture(autouse=True)
def _default_precision():
    T.set_default_dtype(np.float32)
    yield
    T.set_default_dtype(np.float32)


@pytest.fixture
def tokenizer():
    return Tokenizer(ALPHABET)


def random_model(tokenizer, seed=0, n_layers=2, d_model=8, n_heads=2, d_ff=16, std=0.5, dtype=None):
    """Model with O(1) random weights so every gradient is well above rounding noise."""
    cfg = ModelConfig(vocab_size=len(tokenizer), d_model=d_model, n_layers=n_layers, n_heads=n_heads,
                      d_ff=d_ff, max_seq_len=32, seed=seed)
    model = TransformerModel.initialize(cfg, tokenizer)
    rng = np.random.default_rng(seed + 1000)
    params = {}
    for name, p in model.params.items():
        if name.endswith("norm"):
            params[name] = 1.0 + 0.1 * rng.normal(size=p.shape)
        else:
            params[name] = rng.normal(0.0, std, p.shape)
    return TransformerModel(cfg, params, tokenizer, dtype=dtype)


def random_adapters(config, seed=0, rank=2, alpha=4.0, std=0.3):
    adapters = init_adapters(config, rank, alpha, seed)
    rng = np.random.default_rng(seed + 7)
    for p in adapters.parameters():
        p.data[...] = rng.normal(0.0, std, p.shape)
    return adapters


@pytest.fixture
def small_model(tokenizer):
    return random_model(tokenizer).freeze()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

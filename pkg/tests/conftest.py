import numpy as np
import pytest

from loralens.model import LoraConfig, ModelConfig, init_adapters, init_backbone, init_head
from loralens.train import Checkpoint

TINY = ModelConfig(num_layers=2, model_dim=8, num_heads=2, mlp_hidden=16, input_dim=4, num_classes=4, seq_len=5)
TINY_LORA = LoraConfig(rank=2, dropout=0.1)


def tiny_params(seed=0, random_b=False, lora=TINY_LORA, cfg=TINY):
    params = {**init_backbone(cfg, seed), **init_head(cfg, seed)}
    if lora is not None:
        params.update(init_adapters(cfg, lora, seed, random_b=random_b))
    return params


def tiny_checkpoint(seed=0, random_b=False, lora=TINY_LORA, cfg=TINY):
    return Checkpoint(cfg, tiny_params(seed, random_b, lora, cfg), lora, seed)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_batch(rng):
    return rng.normal(size=(3, TINY.seq_len, TINY.input_dim))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

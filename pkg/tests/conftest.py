import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cptlab.model import ModelConfig, init_model


def rel_err(a, b, floor=1e-5):
    """Elementwise |a-b| / max(|a|, |b|, floor), reduced to the max."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                       vocab_size=64, max_seq_len=32, seed=7)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config)

import numpy as np
import pytest

from sleepstager import ModelConfig, init_params


TINY = dict(patch_len=5, n_tokens=9, d_model=16, depth=2, n_heads=2,
            d_ff=32, dropout=0.0, n_positions=9, n_classes=5)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=7, dtype=np.float64)


def rand_tokens(rng, n_tokens=9, patch_len=5, dtype=np.float64):
    return rng.normal(size=(n_tokens, patch_len)).astype(dtype)

import numpy as np
import pytest

from amtrf import model as M
from amtrf.math_core import SeededRng


def tiny_config(variant="aug_mem", **kw) -> M.ModelConfig:
    base = dict(
        layers=2,
        d_model=8,
        num_heads=2,
        ffn_dim=16,
        dropout_rate=0.0,
        variant=variant,
        segment_B=4,
        context_L=2,
        context_R=2,
        memory_capacity=None,
        trt_left=2,
        trt_right=1,
        input_dim=3,
        output_classes=5,
    )
    base.update(kw)
    return M.ModelConfig().with_(**base)


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def rng():
    return SeededRng(1234)


def random_params(config, seed=0):
    return M.init_params(config, SeededRng(seed))


def random_input(config, t_raw, seed=1):
    return SeededRng(seed).normal((t_raw, config.input_dim)).astype(config.dtype)


@pytest.fixture
def assert_close():
    def check(a, b, tol):
        a, b = np.asarray(a), np.asarray(b)
        assert a.shape == b.shape, (a.shape, b.shape)
        assert np.max(np.abs(a - b), initial=0.0) < tol

    return check

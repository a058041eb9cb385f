import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from gated_dit.config import DataConfig, EvalConfig, FlowConfig, ModelConfig, RunConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(image_size=8, channels=3, patch_size=4, d_model=8, n_blocks=2, n_heads=2,
                  d_ffn=16, n_classes=6, d_text=8, t_embed_dim=8, t_hidden=8, lora_rank=2)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny_model():
    return tiny_model_config()


@pytest.fixture
def tiny_run(tmp_path):
    return RunConfig(
        model=tiny_model_config(),
        flow=FlowConfig(lr=1e-3, sample_steps=2),
        data=DataConfig(batch_size=2),
        eval=EvalConfig(eval_interval=2, eval_samples=1),
        steps=3,
        seed=0,
        output_dir=str(tmp_path / "run"),
    )

"""
Shared fixtures: a desk-scale experiment small enough to train in a test.
"""

import pytest

from vpt_dml.config import ExperimentConfig, ModelConfig, SyntheticConfig


def make_tiny_config(output_dir: str = "runs/test") -> ExperimentConfig:
    config = ExperimentConfig()
    config.model = ModelConfig(image_size=8, patch_size=4, layers=2, hidden_dim=8, heads=2,
                               head_out_dim=4)
    config.peft.vpt.num_prompts = 2
    config.peft.adapter.mid_dim = 2
    config.proxy.num_prompts = 1
    config.proxy.cls_layers = 1
    config.data.synthetic = SyntheticConfig(classes=8, per_class=4, image_size=8,
                                            cluster_separation=1.0, noise_std=0.05)
    config.data.batch_size = 4
    config.data.per_class = 2
    config.pretrain.steps = 3
    config.pretrain.batch_size = 8
    config.run.steps = 4
    config.run.eval_every = 2
    config.run.prefetch = False
    config.run.output_dir = output_dir
    config.validate()
    return config


@pytest.fixture
def tiny_config(tmp_path):
    return make_tiny_config(str(tmp_path / "run"))

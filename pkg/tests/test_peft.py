"""
Tests for peft.py: prompt schedules, adapters and freeze masks.
"""

import numpy as np
import pytest

from vpt_dml.config import AdapterConfig, ConfigurationError, ModelConfig, PeftConfig, VPTConfig
from vpt_dml.params import ParameterStore
from vpt_dml.peft import (
    PromptStore,
    adapter_forward,
    apply_method,
    is_bias_term,
    prompt_schedule,
    register_adapter,
)
from vpt_dml.tensor import Tensor
from vpt_dml.vit import ViTModel, count_params

TINY = ModelConfig(image_size=8, patch_size=4, layers=2, hidden_dim=8, heads=2, head_out_dim=4)


@pytest.fixture
def model():
    return ViTModel(TINY, seed=0)


def _trainable(model):
    return {name for name, tensor in model.params.items() if tensor.requires_grad}


class TestPromptSchedule:
    """n_i = max(N - tau_step * i, 0)."""

    def test_decreasing(self):
        assert prompt_schedule(10, 2, 12) == [10, 8, 6, 4, 2, 0, 0, 0, 0, 0, 0, 0]

    def test_constant(self):
        assert prompt_schedule(10, 0, 3) == [10, 10, 10]

    def test_no_prompts(self):
        assert prompt_schedule(0, 1, 4) == [0, 0, 0, 0]

    def test_invalid(self):
        with pytest.raises(ValueError):
            prompt_schedule(-1, 0, 4)
        with pytest.raises(ValueError):
            prompt_schedule(4, 0, 0)


class TestPromptStore:
    """Deep prompt storage and counting."""

    def test_vit_small_prompt_count(self):
        store = PromptStore(prompt_schedule(10, 0, 12), 384, 768, np.random.default_rng(0))
        assert store.count() == (46_080, 46_080)

    def test_zero_layers_have_no_entry(self):
        store = PromptStore([3, 0, 1], 8, 48, np.random.default_rng(0))
        assert "prompts.layer1" not in store
        per_layer = store.per_layer()
        assert per_layer[1] is None
        assert per_layer[0].shape == (3, 8)

    def test_uniform_init_bound(self):
        store = PromptStore([50], 8, 48, np.random.default_rng(0))
        bound = np.sqrt(6.0 / (48 + 8))
        assert np.abs(store["prompts.layer0"].data).max() <= bound + 1e-6


class TestAdapter:
    """Bottleneck adapter."""

    def test_identity_at_init(self):
        store = ParameterStore()
        params = register_adapter(store, "a", 6, 2, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(2, 6)))
        np.testing.assert_array_equal(adapter_forward(x, params).data, x.data)

    def test_parameter_count(self):
        store = ParameterStore()
        register_adapter(store, "a", 6, 2, np.random.default_rng(0))
        assert store.count()[0] == 2 * (6 * 2) + 2 + 6


class TestApplyMethod:
    """Freeze masks per method."""

    def test_full(self, model):
        result = apply_method(model, PeftConfig(method="full"))
        assert result.freeze_mask == frozenset()
        assert _trainable(model) == set(model.params)

    def test_linear_probe(self, model):
        apply_method(model, PeftConfig(method="linear_probe"))
        assert _trainable(model) == {n for n in model.params if n.startswith("head.")}

    def test_bitfit(self, model):
        apply_method(model, PeftConfig(method="bitfit"))
        trainable = _trainable(model)
        assert "blocks.0.attn.wq.bias" in trainable
        assert "blocks.0.ln1.beta" in trainable
        assert "blocks.1.ln2.beta" in trainable
        assert "blocks.0.ln1.gamma" not in trainable
        assert "blocks.0.attn.wq.weight" not in trainable
        assert all(is_bias_term(n) or n.startswith("head.") for n in trainable)

    def test_bitfit_count_is_bias_terms_plus_head(self, model):
        result = apply_method(model, PeftConfig(method="bitfit"))
        expected = sum(t.size for n, t in model.params.items()
                       if is_bias_term(n) or n.startswith("head."))
        assert count_params(model, result.freeze_mask).tunable == expected
        # Per block: wq, wk, wv, wo and two MLP biases plus two LayerNorm shifts.
        dim, mlp = TINY.hidden_dim, TINY.hidden_dim * TINY.mlp_ratio
        per_block = 4 * dim + mlp + dim + 2 * dim
        head = sum(t.size for n, t in model.params.items() if n.startswith("head."))
        assert expected == model.params["patch_embed.bias"].size + TINY.layers * per_block + head

    def test_adapter(self, model):
        config = PeftConfig(method="adapter", adapter=AdapterConfig(mid_dim=2, num_layers=1))
        apply_method(model, config)
        trainable = _trainable(model)
        assert "blocks.0.adapter.up.weight" in trainable
        assert "blocks.1.adapter.up.weight" not in model.params
        assert "blocks.0.mlp.fc1.weight" not in trainable

    def test_adapter_layer_out_of_range(self, model):
        config = PeftConfig(method="adapter", adapter=AdapterConfig(layers=[5]))
        with pytest.raises(ConfigurationError):
            apply_method(model, config)

    def test_vpt(self, model):
        config = PeftConfig(method="vpt", vpt=VPTConfig(num_prompts=3, tau_step=2))
        result = apply_method(model, config)
        assert result.prompts is not None
        assert result.prompts.schedule == [3, 1]
        assert _trainable(model) == {n for n in model.params if n.startswith("head.")}
        assert result.added_stores == [result.prompts]

    def test_vpt_layer_limit(self, model):
        config = PeftConfig(method="vpt", vpt=VPTConfig(num_prompts=3, num_layers=1))
        assert apply_method(model, config).prompts.schedule == [3, 0]

    def test_vpt_bitfit(self, model):
        config = PeftConfig(method="vpt", combine_bitfit=True)
        apply_method(model, config)
        assert "blocks.1.mlp.fc2.bias" in _trainable(model)

    def test_vpt_with_adapters(self, model):
        config = PeftConfig(method="vpt", combine_adapter=True,
                            adapter=AdapterConfig(mid_dim=2, layers=[1]))
        result = apply_method(model, config)
        assert result.prompts is not None
        assert "blocks.1.adapter.down.weight" in _trainable(model)

    def test_reapply_reuses_prompts(self, model):
        config = PeftConfig(method="vpt")
        first = apply_method(model, config)
        second = apply_method(model, config)
        assert first.freeze_mask == second.freeze_mask
        assert second.prompts is first.prompts

    def test_switching_removes_adapters(self, model):
        apply_method(model, PeftConfig(method="adapter"))
        apply_method(model, PeftConfig(method="linear_probe"))
        assert not any(".adapter." in n for n in model.params)

    def test_weights_unchanged(self, model):
        before = model.params.state_dict()
        apply_method(model, PeftConfig(method="bitfit"))
        for name, value in model.params.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    def test_linear_probe_is_smallest(self):
        counts = {}
        for method in ("full", "linear_probe", "bitfit", "adapter", "vpt"):
            model = ViTModel(TINY, seed=0)
            result = apply_method(model, PeftConfig(method=method))
            counts[method] = count_params(model, result.freeze_mask, result.added_stores).tunable
        assert min(counts, key=counts.get) == "linear_probe"
        assert counts["full"] == max(counts.values())

"""
Parameter-efficient fine-tuning strategies.

Each method is expressed as two things applied to a built `ViTModel`:
1. A freeze mask: which backbone parameters stay trainable
2. Structural additions: adapters inside blocks, or a store of deep prompts

| method        | trainable                                  |
|---------------|--------------------------------------------|
| full          | everything                                 |
| linear_probe  | head                                       |
| bitfit        | every linear-projection bias + head        |
| adapter       | adapter weights + head                     |
| vpt           | per-layer prompts + head                   |

`combine_bitfit` additionally unfreezes the biases (the "(B)" variants);
`combine_adapter` adds adapters to a VPT run. Plain or semantic proxies are
owned by the loss side and are not part of the mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .config import AdapterConfig, ConfigurationError, PeftConfig
from .params import ParameterStore, kaiming_uniform, uniform_fan
from .tensor import Tensor

if TYPE_CHECKING:
    from .vit import ViTModel

logger = logging.getLogger(__name__)


def prompt_schedule(num_prompts: int, tau_step: int, layers: int) -> list[int]:
    """
    Prompt count per layer, n_i = max(N - tau_step * i, 0).

    Example:
        >>> prompt_schedule(10, 2, 12)
        [10, 8, 6, 4, 2, 0, 0, 0, 0, 0, 0, 0]
    """
    if num_prompts < 0 or tau_step < 0 or layers < 1:
        raise ValueError("prompt_schedule needs N >= 0, tau_step >= 0, layers >= 1")
    return [max(num_prompts - tau_step * i, 0) for i in range(layers)]


@dataclass
class AdapterParams:
    down_weight: Tensor
    down_bias: Tensor
    up_weight: Tensor
    up_bias: Tensor

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str) -> AdapterParams:
        return cls(
            store[f"{prefix}.down.weight"],
            store[f"{prefix}.down.bias"],
            store[f"{prefix}.up.weight"],
            store[f"{prefix}.up.bias"],
        )


def register_adapter(store: ParameterStore, prefix: str, dim: int, mid_dim: int,
                     rng: np.random.Generator) -> AdapterParams:
    """Down-projection kaiming-uniform, up-projection zero: identity at init."""
    store.add(f"{prefix}.down.weight", kaiming_uniform(rng, (dim, mid_dim), dim))
    store.add(f"{prefix}.down.bias", np.zeros(mid_dim))
    store.add(f"{prefix}.up.weight", np.zeros((mid_dim, dim)))
    store.add(f"{prefix}.up.bias", np.zeros(dim))
    return AdapterParams.from_store(store, prefix)


def adapter_delta(x: Tensor, params: AdapterParams) -> Tensor:
    """Up(ReLU(Down(x))), the residual branch of a bottleneck adapter."""
    hidden = T.relu(T.add(T.matmul(x, params.down_weight), params.down_bias))
    return T.add(T.matmul(hidden, params.up_weight), params.up_bias)


def adapter_forward(x: Tensor, params: AdapterParams) -> Tensor:
    """x + Up(ReLU(Down(x)))."""
    return T.add(x, adapter_delta(x, params))


class PromptStore(ParameterStore):
    """
    Deep visual prompts: `prompts.layer{i}` holds the n_i × D prompts
    inserted before block i. Layers with n_i = 0 have no entry.
    """

    def __init__(self, schedule: list[int], dim: int, patch_dim: int,
                 rng: np.random.Generator) -> None:
        super().__init__()
        self.schedule = list(schedule)
        self.dim = dim
        for layer, count in enumerate(self.schedule):
            if count > 0:
                self.add(
                    f"prompts.layer{layer}",
                    uniform_fan(rng, (count, dim), patch_dim, dim),
                )

    def per_layer(self) -> list[Tensor | None]:
        return [
            self[f"prompts.layer{i}"] if n > 0 else None
            for i, n in enumerate(self.schedule)
        ]


@dataclass
class PeftResult:
    freeze_mask: frozenset[str]
    added_stores: list[ParameterStore] = field(default_factory=list)
    prompts: PromptStore | None = None


def is_bias_term(name: str) -> bool:
    """True for an additive shift: a linear bias or a LayerNorm beta."""
    return name.endswith((".bias", ".beta"))


def apply_method(model: ViTModel, config: PeftConfig, seed: int = 0) -> PeftResult:
    """
    Set trainable flags and add the structure a PEFT method needs.

    Never changes existing weight values. Re-applying the same configuration
    returns the same mask and reuses the stores it created the first time.

    Args:
        model: Backbone whose registry is already built
        config: PEFT section of the experiment configuration
        seed: Seed for initializing newly inserted adapters / prompts

    Returns:
        PeftResult with the frozen parameter names and any added stores

    Raises:
        ConfigurationError: If adapter layers fall outside [0, L)
    """
    layers = model.config.layers
    rng = np.random.default_rng([seed, 0xAD])

    wants_adapters = config.method == "adapter" or (
        config.method == "vpt" and config.combine_adapter
    )
    if wants_adapters:
        adapter_layers = config.adapter.resolved_layers(layers)
        for layer in adapter_layers:
            if not 0 <= layer < layers:
                raise ConfigurationError(
                    f"Adapter layer {layer} outside [0, {layers})"
                )
        model.insert_adapters(config.adapter, adapter_layers, rng)
    elif model.adapter_layers:
        model.remove_adapters()

    added: list[ParameterStore] = []
    prompts: PromptStore | None = None
    if config.method == "vpt":
        schedule = prompt_schedule(config.vpt.num_prompts, config.vpt.tau_step, layers)
        if config.vpt.num_layers is not None:
            schedule = [n if i < config.vpt.num_layers else 0
                        for i, n in enumerate(schedule)]
        existing = model.prompt_store
        if existing is None or existing.schedule != schedule:
            model.prompt_store = PromptStore(
                schedule, model.config.hidden_dim, model.config.patch_dim,
                np.random.default_rng([seed, 0x9B]),
            )
        prompts = model.prompt_store
        added.append(prompts)
    else:
        model.prompt_store = None

    trainable = _trainable_names(model, config, wants_adapters)
    for name, tensor in model.params.items():
        tensor.requires_grad = name in trainable
    freeze_mask = frozenset(name for name in model.params if name not in trainable)
    logger.debug(
        "Applied %s: %d of %d backbone tensors trainable",
        config.method, len(model.params) - len(freeze_mask), len(model.params),
    )
    return PeftResult(freeze_mask=freeze_mask, added_stores=added, prompts=prompts)


def _trainable_names(model: ViTModel, config: PeftConfig,
                     with_adapters: bool) -> set[str]:
    names = list(model.params)
    if config.method == "full":
        return set(names)
    trainable = {n for n in names if n.startswith("head.")}
    if config.method == "bitfit" or config.combine_bitfit:
        trainable |= {n for n in names if is_bias_term(n)}
    if with_adapters:
        trainable |= {n for n in names if ".adapter." in n}
    return trainable


def adapter_config_key(config: AdapterConfig, layers: list[int]) -> tuple[object, ...]:
    return (config.mid_dim, tuple(layers), config.position, config.site)

"""
Named parameter registries.

A `ParameterStore` maps stable dotted names ("blocks.0.attn.wq.weight") to
tensors. The backbone, the encoder prompts, the proxy tower and the GRU each
own one store; the checkpoint writer and the optimizer only ever see names
and tensors, never model structure.
"""

from __future__ import annotations

from collections.abc import Iterator
from typing import Protocol

import numpy as np

from .tensor import Tensor


class CountsParameters(Protocol):
    """Anything that can report (total, tunable) scalar parameter counts."""

    def count(self) -> tuple[int, int]: ...


class ParameterStore:
    """Ordered name → Tensor registry with per-parameter trainable flags."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"Parameter already registered: {name}")
        tensor = Tensor(data, requires_grad=trainable, name=name)
        self._params[name] = tensor
        return tensor

    def remove(self, name: str) -> None:
        del self._params[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if t.requires_grad)

    def set_trainable(self, trainable: bool) -> None:
        for tensor in self._params.values():
            tensor.requires_grad = trainable

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def count(self) -> tuple[int, int]:
        total = sum(t.size for t in self._params.values())
        tunable = sum(t.size for t in self._params.values() if t.requires_grad)
        return total, tunable

    @property
    def nbytes(self) -> int:
        return sum(int(t.data.nbytes) for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Overwrite values in place; every registered name must be present."""
        for name, tensor in self._params.items():
            if name not in state:
                raise KeyError(f"Missing parameter in state: {name}")
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ValueError(
                    f"Shape mismatch for {name}: {value.shape} vs {tensor.shape}"
                )
            tensor.data = value.astype(tensor.data.dtype).copy()


def uniform_fan(rng: np.random.Generator, shape: tuple[int, ...],
                fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform in [-r, r] with r = sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    """Kaiming-uniform for ReLU layers: bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)

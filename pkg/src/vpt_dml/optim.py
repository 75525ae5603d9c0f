"""
Optimizers over named parameters.

Three kinds share one entry point, `optimizer_step`:
- sgd:                 p <- p - lr * g
- adaptive:            bias-corrected first/second moments (Adam)
- adaptive_decoupled:  the same, plus weight decay applied to the parameter
                       itself rather than folded into the gradient (AdamW)

Moments are stored per parameter name together with that parameter's own
step counter, so a class prompt that is paged out and back in resumes with
exactly the state it left with.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from .config import OptimConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @property
    def nbytes(self) -> int:
        return int(self.m.nbytes + self.v.nbytes)


def learning_rate_for(name: str, config: OptimConfig) -> float:
    """The proxy head follows the encoder-side rate; other proxy-side tensors use lr_proxy."""
    if name.startswith("proxy.") and not name.startswith("proxy.head."):
        return config.lr_proxy
    return config.lr


class OptimizerState:
    """Hyperparameters plus moment buffers for every parameter stepped so far."""

    def __init__(self, config: OptimConfig,
                 learning_rates: Callable[[str], float] | None = None) -> None:
        self.config = config
        self._learning_rates = learning_rates or (lambda name: learning_rate_for(name, config))
        self.moments: dict[str, Moments] = {}

    @property
    def adaptive(self) -> bool:
        return self.config.kind != "sgd"

    def lr_for(self, name: str) -> float:
        return self._learning_rates(name)

    def pop(self, name: str) -> Moments | None:
        return self.moments.pop(name, None)

    def push(self, name: str, moments: Moments | None) -> None:
        if moments is not None:
            self.moments[name] = moments

    @property
    def nbytes(self) -> int:
        return sum(m.nbytes for m in self.moments.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        for name in sorted(self.moments):
            state.update(moments_state(name, self.moments[name]))
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.moments = {}
        for key in state:
            if key.startswith("optim.") and key.endswith(".m"):
                name = key[len("optim."):-len(".m")]
                self.moments[name] = Moments(
                    m=np.asarray(state[key], dtype=np.float32).copy(),
                    v=np.asarray(state[f"optim.{name}.v"], dtype=np.float32).copy(),
                    step=int(np.asarray(state[f"optim.{name}.step"])[0]),
                )


def moments_state(name: str, moments: Moments) -> dict[str, np.ndarray]:
    return {
        f"optim.{name}.m": moments.m.copy(),
        f"optim.{name}.v": moments.v.copy(),
        f"optim.{name}.step": np.array([moments.step], dtype=np.int64),
    }


def global_grad_norm(params: Iterable[tuple[str, Tensor]]) -> float:
    """L2 norm over every gradient, summed in name order."""
    total = 0.0
    for _, tensor in sorted(params, key=lambda item: item[0]):
        if tensor.grad is not None:
            total += float(np.sum(tensor.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def optimizer_step(params: Iterable[tuple[str, Tensor]], state: OptimizerState) -> float:
    """
    Update every parameter that received a gradient.

    Parameters without a gradient (frozen, or not reached by this batch's
    graph) are left untouched, including by weight decay.

    Args:
        params: (name, tensor) pairs; gradients are read from `tensor.grad`
        state: Optimizer hyperparameters and moments

    Returns:
        Global gradient norm before clipping
    """
    config = state.config
    stepped = [(name, t) for name, t in params if t.grad is not None]
    grad_norm = global_grad_norm(stepped)
    clip = 1.0
    if config.max_grad_norm is not None and grad_norm > config.max_grad_norm:
        clip = config.max_grad_norm / grad_norm

    beta1, beta2 = config.betas
    for name, tensor in stepped:
        assert tensor.grad is not None
        lr = state.lr_for(name)
        grad = tensor.grad.astype(np.float64) * clip
        value = tensor.data.astype(np.float64)

        if not state.adaptive:
            value = value - lr * grad
        else:
            moments = state.moments.get(name)
            if moments is None:
                moments = Moments(np.zeros_like(tensor.data), np.zeros_like(tensor.data))
                state.moments[name] = moments
            moments.step += 1
            m = beta1 * moments.m.astype(np.float64) + (1.0 - beta1) * grad
            v = beta2 * moments.v.astype(np.float64) + (1.0 - beta2) * grad**2
            m_hat = m / (1.0 - beta1**moments.step)
            v_hat = v / (1.0 - beta2**moments.step)
            if config.kind == "adaptive_decoupled":
                value = value - lr * config.weight_decay * value
            value = value - lr * m_hat / (np.sqrt(v_hat) + config.eps)
            moments.m = m.astype(tensor.data.dtype)
            moments.v = v.astype(tensor.data.dtype)

        tensor.data = value.astype(tensor.data.dtype)
    return grad_norm

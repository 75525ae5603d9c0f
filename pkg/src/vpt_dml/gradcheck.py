"""
Central-difference verification of every backward rule.

`grad_check` compares the analytic gradient of a random projection of a
function's output against (f(x + h) - f(x - h)) / 2h, entry by entry. The
suite below covers each kernel, the adapter, prompt injection, both
accumulators, bias fusion, the Proxy-Anchor loss and a two-layer toy model
end to end. Everything runs in float64.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossConfig, ModelConfig, PeftConfig, ProxyConfig, VPTConfig
from .loss import proxy_anchor_loss
from .params import uniform_fan
from .peft import AdapterParams, adapter_forward, apply_method
from .proxy import (
    GRUWeights,
    ProxyState,
    accumulate_batch,
    ema_update,
    fuse_bias,
    gru_update,
    proxy_samples,
)
from .tensor import Graph, Tensor
from .vit import ViTModel, head

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
# Gradients smaller than this are compared in absolute terms.
RELATIVE_FLOOR = 1e-6
TOY_MODEL = ModelConfig(image_size=8, patch_size=4, layers=2, hidden_dim=8, heads=2,
                        head_out_dim=4)
CHECK_LOSS = LossConfig(pa_scale=4.0, margin=0.1)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    entries: int
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def relative_error(analytic: float, numeric: float, floor: float = RELATIVE_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _probe(fn: Callable[[], Tensor], weights: np.ndarray) -> float:
    return float(np.sum(fn().data.astype(np.float64) * weights))


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = DEFAULT_STEP,
               max_entries: int | None = None, seed: int = 0) -> tuple[float, int]:
    """
    Largest relative error between analytic and numeric gradients.

    The output of `fn` is reduced to a scalar with fixed random weights, so
    every output entry contributes. `fn` must read its inputs from the given
    tensors, which are perturbed in place.

    Args:
        fn: Zero-argument forward function
        inputs: float64 tensors to differentiate against
        h: Central-difference step
        max_entries: Check at most this many randomly chosen entries per input
        seed: Seed for the output projection and entry sampling

    Returns:
        (max relative error, number of checked entries)

    Raises:
        ValueError: If an input is not stored in float64
    """
    for tensor in inputs:
        if tensor.data.dtype != np.float64:
            raise ValueError("grad_check inputs must be float64 (use precision('float64'))")
        tensor.requires_grad = True
        tensor.grad = None

    rng = np.random.default_rng(seed)
    weights = rng.standard_normal(fn().shape)
    with Graph() as graph:
        scalar = T.reduce_sum(T.mul(fn(), Tensor(weights)))
    graph.backward(scalar)

    worst = 0.0
    checked = 0
    for tensor in inputs:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = np.arange(tensor.size)
        if max_entries is not None and tensor.size > max_entries:
            flat = rng.choice(tensor.size, size=max_entries, replace=False)
        for index in flat:
            position = np.unravel_index(int(index), tensor.shape)
            original = float(tensor.data[position])
            tensor.data[position] = original + h
            plus = _probe(fn, weights)
            tensor.data[position] = original - h
            minus = _probe(fn, weights)
            tensor.data[position] = original
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, relative_error(float(analytic[position]), numeric))
            checked += 1
    return worst, checked


def _param(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Tensor:
    magnitude = rng.uniform(0.1, 1.0, shape)
    return Tensor(magnitude * rng.choice([-1.0, 1.0], shape), requires_grad=True)


def _check_matmul(rng: np.random.Generator) -> tuple[float, int]:
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    c = _param(rng, 2, 5, 3)
    return grad_check(lambda: T.matmul(T.matmul(a, b), c), [a, b, c])


def _check_elementwise(rng: np.random.Generator) -> tuple[float, int]:
    a, b, bias = _param(rng, 3, 4), _param(rng, 3, 4), _param(rng, 4)
    return grad_check(
        lambda: T.scale(T.mul(T.sub(T.add(a, bias), b), a), 1.5, 0.2), [a, b, bias]
    )


def _check_activations(rng: np.random.Generator) -> tuple[float, int]:
    x = _away_from_zero(rng, 3, 5)
    return grad_check(
        lambda: T.add(T.add(T.relu(x), T.gelu(x)), T.add(T.sigmoid(x), T.tanh(x))), [x]
    )


def _check_structural(rng: np.random.Generator) -> tuple[float, int]:
    x, y = _param(rng, 2, 3, 4), _param(rng, 2, 2, 4)

    def fn() -> Tensor:
        joined = T.concat([x, y], axis=1)
        part = T.slice_axis(joined, 1, 1, 4)
        gathered = T.take(part, [0, 2, 2], axis=1)
        moved = T.transpose(T.reshape(gathered, (2, 3, 2, 2)), (0, 2, 1, 3))
        return T.expand(moved, 2)

    return grad_check(fn, [x, y])


def _check_reductions(rng: np.random.Generator) -> tuple[float, int]:
    x = _param(rng, 3, 4, 2)
    return grad_check(
        lambda: T.concat([T.reduce_sum(x, axis=1), T.mean(x, axis=1)], axis=0), [x]
    )


def _check_softmax(rng: np.random.Generator) -> tuple[float, int]:
    x = _param(rng, 3, 5, low=-2.0, high=2.0)
    return grad_check(lambda: T.add(T.softmax(x, axis=-1), T.log_softmax(x, axis=0)), [x])


def _check_layer_norm(rng: np.random.Generator) -> tuple[float, int]:
    x, gamma, beta = _param(rng, 2, 3, 6), _param(rng, 6), _param(rng, 6)
    return grad_check(lambda: T.layer_norm(x, gamma, beta), [x, gamma, beta])


def _check_l2_normalize(rng: np.random.Generator) -> tuple[float, int]:
    x = _param(rng, 4, 5)
    return grad_check(lambda: T.l2_normalize(x, axis=-1), [x])


def _check_log1p_exp_sum(rng: np.random.Generator) -> tuple[float, int]:
    x = _param(rng, 6, 4, low=-3.0, high=3.0)
    mask = rng.random((6, 4)) < 0.5
    mask[:, 2] = False
    return grad_check(lambda: T.log1p_exp_sum(x, axis=0, mask=mask), [x])


def _check_adapter(rng: np.random.Generator) -> tuple[float, int]:
    x = _param(rng, 2, 3, 6)
    params = AdapterParams(
        _param(rng, 6, 3), _param(rng, 3), _param(rng, 3, 6), _param(rng, 6)
    )
    return grad_check(
        lambda: adapter_forward(x, params),
        [x, params.down_weight, params.down_bias, params.up_weight, params.up_bias],
    )


def _toy_model(seed: int, method: str = "full", num_prompts: int = 0) -> ViTModel:
    model = ViTModel(TOY_MODEL, seed=seed)
    apply_method(model, PeftConfig(method=method, vpt=VPTConfig(num_prompts=num_prompts)),
                 seed=seed)
    return model


def _check_attention(rng: np.random.Generator) -> tuple[float, int]:
    model = _toy_model(1)
    h = _param(rng, 2, 5, TOY_MODEL.hidden_dim)
    p = model.params
    weights = [p[f"blocks.0.attn.{w}.weight"] for w in ("wq", "wk", "wv", "wo")]
    return grad_check(lambda: model.attention(h, 0), [h, *weights])


def _check_prompts(rng: np.random.Generator) -> tuple[float, int]:
    model = _toy_model(2, method="vpt", num_prompts=3)
    assert model.prompt_store is not None
    prompts = model.prompt_store.per_layer()
    images = rng.random((2, TOY_MODEL.image_size, TOY_MODEL.image_size, 3))
    per_sample = _param(rng, 2, 2, TOY_MODEL.hidden_dim)

    def fn() -> Tensor:
        layers = [T.concat([T.expand(prompts[0], 2), per_sample], axis=1), prompts[1]]
        return model.encode(model.patchify(images), layers)

    return grad_check(fn, [t for t in prompts if t is not None] + [per_sample])


def _gru_weights(rng: np.random.Generator, dim: int) -> GRUWeights:
    square = [Tensor(uniform_fan(rng, (dim, dim), dim, dim), requires_grad=True)
              for _ in range(6)]
    bias = [_param(rng, dim, low=-0.2, high=0.2) for _ in range(3)]
    return GRUWeights(square[0], square[1], bias[0], square[2], square[3], bias[1],
                      square[4], square[5], bias[2])


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> Tensor:
    x = rng.standard_normal((rows, dim))
    return Tensor(x / np.linalg.norm(x, axis=1, keepdims=True), requires_grad=True)


def _check_gru(kind: str) -> Callable[[np.random.Generator], tuple[float, int]]:
    def check(rng: np.random.Generator) -> tuple[float, int]:
        dim = 5
        weights = _gru_weights(rng, dim)
        previous, sample = _unit_rows(rng, 1, dim), _unit_rows(rng, 1, dim)
        tensors = [previous, sample, weights.w_z, weights.u_z, weights.b_z, weights.w_r,
                   weights.u_r, weights.b_r, weights.w_h, weights.u_h, weights.b_h]
        return grad_check(lambda: gru_update(previous, sample, weights, kind), tensors)

    return check


def _check_ema(rng: np.random.Generator) -> tuple[float, int]:
    previous, sample = _unit_rows(rng, 1, 6), _unit_rows(rng, 1, 6)
    return grad_check(
        lambda: T.concat([ema_update(previous, sample, 0.7),
                          ema_update(previous, sample, 0.7, textbook=True)], axis=0),
        [previous, sample],
    )


def _check_fusion(rng: np.random.Generator) -> tuple[float, int]:
    semantic, bias = _unit_rows(rng, 4, 6), _param(rng, 4, 6)
    return grad_check(lambda: fuse_bias(semantic, bias, 0.3), [semantic, bias])


def _check_loss(convention: str) -> Callable[[np.random.Generator], tuple[float, int]]:
    def check(rng: np.random.Generator) -> tuple[float, int]:
        x, proxies = _param(rng, 6, 5), _param(rng, 4, 5)
        labels = [0, 0, 1, 2, 2, 2]
        config = LossConfig(pa_scale=CHECK_LOSS.pa_scale, margin=CHECK_LOSS.margin,
                            margin_convention=convention)
        return grad_check(
            lambda: proxy_anchor_loss(T.l2_normalize(x), T.l2_normalize(proxies), labels,
                                      config),
            [x, proxies],
        )

    return check


def _check_toy_model(rng: np.random.Generator) -> tuple[float, int]:
    model = _toy_model(3, method="full")
    images = rng.random((4, TOY_MODEL.image_size, TOY_MODEL.image_size, 3))
    proxies = _param(rng, 2, TOY_MODEL.head_out_dim)
    labels = [0, 0, 1, 1]

    def fn() -> Tensor:
        embeddings = T.l2_normalize(model.embed(images))
        return proxy_anchor_loss(embeddings, T.l2_normalize(proxies), labels, CHECK_LOSS)

    tensors = [t for _, t in model.params.items()] + [proxies]
    return grad_check(fn, tensors, max_entries=4)


def _check_semantic_step(rng: np.random.Generator) -> tuple[float, int]:
    model = _toy_model(4, method="vpt", num_prompts=2)
    assert model.prompt_store is not None
    config = ProxyConfig(num_prompts=2, cls_layers=1, accumulator="gru_tanh")
    state = ProxyState(config, num_classes=3, model=model, seed=4)
    images = rng.random((4, TOY_MODEL.image_size, TOY_MODEL.image_size, 3))
    labels = [0, 0, 2, 2]
    encoder_prompts = model.prompt_store.per_layer()

    def fn() -> Tensor:
        tokens = model.patchify(images)
        embeddings = T.l2_normalize(head(model.encode(tokens, encoder_prompts),
                                         model.head_params))
        samples = proxy_samples(model, tokens, labels, encoder_prompts, embeddings, state)
        fresh = accumulate_batch(samples, labels, state, np.random.default_rng(0))
        return proxy_anchor_loss(embeddings, state.fused(fresh), labels, CHECK_LOSS)

    tensors = [t for _, t in state.parameters()]
    tensors += [t for t in encoder_prompts if t is not None]
    return grad_check(fn, tensors, max_entries=4)


SUITE: list[tuple[str, Callable[[np.random.Generator], tuple[float, int]]]] = [
    ("matmul", _check_matmul),
    ("add/sub/mul/scale", _check_elementwise),
    ("relu/gelu/sigmoid/tanh", _check_activations),
    ("concat/slice/take/reshape/transpose/expand", _check_structural),
    ("reduce_sum/mean", _check_reductions),
    ("softmax/log_softmax", _check_softmax),
    ("layer_norm", _check_layer_norm),
    ("l2_normalize", _check_l2_normalize),
    ("log1p_exp_sum", _check_log1p_exp_sum),
    ("adapter", _check_adapter),
    ("attention", _check_attention),
    ("prompt injection", _check_prompts),
    ("gru update (relu)", _check_gru("gru_relu")),
    ("gru update (tanh)", _check_gru("gru_tanh")),
    ("ema update", _check_ema),
    ("bias fusion", _check_fusion),
    ("proxy-anchor loss (literal)", _check_loss("literal")),
    ("proxy-anchor loss (published)", _check_loss("published")),
    ("toy model end to end", _check_toy_model),
    ("semantic proxy step", _check_semantic_step),
]


def run_suite(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE) -> list[CheckResult]:
    """Run every check in float64 and return one result per item."""
    results: list[CheckResult] = []
    with T.precision("float64"):
        for index, (name, check) in enumerate(SUITE):
            error, entries = check(np.random.default_rng([seed, index]))
            result = CheckResult(name, error, entries, tolerance)
            logger.debug("%s: max relative error %.3e over %d entries", name, error, entries)
            if not result.passed:
                logger.warning("Gradient check failed for %s (%.3e)", name, error)
            results.append(result)
    return results

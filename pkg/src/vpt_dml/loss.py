"""
Proxy-Anchor loss and the classification loss used for backbone pretraining.

With S = X Qᵀ (cosine similarities of unit rows), scale τ and margin δ:

    positive:  (1/|P⁺|) Σ_{p ∈ P⁺} log(1 + Σ_{x ∈ X_p⁺} exp(-τ S + δ))
    negative:  (1/C)    Σ_{p}      log(1 + Σ_{x ∈ X_p⁻} exp( τ S + δ))

P⁺ are the proxies with at least one positive in the batch; every proxy
enters the negative term. The "published" margin convention uses
-τ(S - δ) and τ(S + δ) instead.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from typing import Protocol

import numpy as np

from . import tensor as T
from .config import LossConfig
from .tensor import Tensor
from .utils import DMLError

logger = logging.getLogger(__name__)


class LossError(DMLError):
    """Raised for invalid loss inputs or a non-finite loss value."""


class NonFiniteLossError(LossError):
    """Raised when the loss evaluates to NaN or Inf."""

    def __init__(self, value: float) -> None:
        self.value = value
        super().__init__(f"Loss is not finite: {value}")


class FusedProxies(Protocol):
    """Anything exposing fused proxies for all classes (see ProxyState)."""

    def fused(self, fresh: Mapping[int, Tensor] | None = None) -> Tensor: ...


def _one_hot(labels: Sequence[int], classes: int, op: str) -> np.ndarray:
    label_array = np.asarray(labels, dtype=np.int64)
    if label_array.size and (label_array.min() < 0 or label_array.max() >= classes):
        raise LossError(f"{op}: labels must lie in [0, {classes})")
    mask = np.zeros((label_array.size, classes), dtype=bool)
    mask[np.arange(label_array.size), label_array] = True
    return mask


def proxy_anchor_loss(embeddings: Tensor, proxies: Tensor, labels: Sequence[int],
                      config: LossConfig) -> Tensor:
    """
    Proxy-Anchor loss over unit-norm embeddings (B × E) and proxies (C × E).

    Raises:
        LossError: If no proxy has a positive, a label is out of range, or the
            loss is not finite
    """
    batch, classes = embeddings.shape[0], proxies.shape[0]
    if len(labels) != batch:
        raise LossError(f"proxy_anchor_loss: {len(labels)} labels for {batch} embeddings")
    positive = _one_hot(labels, classes, "proxy_anchor_loss")
    with_positive = positive.any(axis=0)
    num_positive = int(with_positive.sum())
    if num_positive == 0:
        raise LossError("proxy_anchor_loss: no proxy has a positive sample")

    similarity = T.matmul(embeddings, T.transpose(proxies, (1, 0)))
    tau, delta = config.pa_scale, config.margin
    if config.margin_convention == "published":
        pos_logits = T.scale(similarity, -tau, tau * delta)
        neg_logits = T.scale(similarity, tau, tau * delta)
    else:
        pos_logits = T.scale(similarity, -tau, delta)
        neg_logits = T.scale(similarity, tau, delta)

    pos_terms = T.log1p_exp_sum(pos_logits, axis=0, mask=positive)
    neg_terms = T.log1p_exp_sum(neg_logits, axis=0, mask=~positive)
    weights = Tensor(with_positive / num_positive)
    loss = T.add(
        T.reduce_sum(T.mul(pos_terms, weights)),
        T.scale(T.reduce_sum(neg_terms), 1.0 / classes),
    )
    if not np.isfinite(loss.item()):
        raise NonFiniteLossError(loss.item())
    return loss


def training_loss(embeddings: Tensor, labels: Sequence[int], proxies: FusedProxies,
                  fresh: Mapping[int, Tensor], config: LossConfig) -> Tensor:
    """
    Loss of one training batch against the fused proxies of every class.

    `fresh` holds this batch's accumulated semantic proxies; all other rows
    enter as constants so that, outside the batch, only the bias proxies
    receive gradients.
    """
    return proxy_anchor_loss(embeddings, proxies.fused(fresh), labels, config)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy of B × K logits."""
    batch, classes = logits.shape
    target = Tensor(_one_hot(labels, classes, "cross_entropy"))
    picked = T.reduce_sum(T.mul(T.log_softmax(logits, axis=-1), target))
    return T.scale(picked, -1.0 / batch)

"""
Vision Transformer with deep prompt slots.

Images are cut into k×k patches, projected to width D, prefixed by a CLS
token and given learned position embeddings. Each pre-norm block runs
multi-head self-attention and a GELU MLP with residual connections.

Deep prompts: before block i the layer-i prompts are
appended after the token sequence; after the block the output rows at prompt
positions are dropped, so the next block sees the token sequence plus its
own fresh prompts. Prompts carry no position embedding.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import AdapterConfig, ModelConfig
from .params import CountsParameters, ParameterStore
from .peft import (
    AdapterParams,
    PromptStore,
    adapter_config_key,
    adapter_delta,
    adapter_forward,
    register_adapter,
)
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)


@dataclass
class HeadParams:
    """LayerNorm + linear projector. The sample and proxy towers each own one."""

    norm_gamma: Tensor
    norm_beta: Tensor
    weight: Tensor
    bias: Tensor

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str = "head") -> HeadParams:
        return cls(
            store[f"{prefix}.norm.gamma"],
            store[f"{prefix}.norm.beta"],
            store[f"{prefix}.proj.weight"],
            store[f"{prefix}.proj.bias"],
        )


def register_head(store: ParameterStore, prefix: str, dim: int, out_dim: int,
                  rng: np.random.Generator, std: float) -> HeadParams:
    store.add(f"{prefix}.norm.gamma", np.ones(dim))
    store.add(f"{prefix}.norm.beta", np.zeros(dim))
    store.add(f"{prefix}.proj.weight", rng.normal(0.0, std, (dim, out_dim)))
    store.add(f"{prefix}.proj.bias", np.zeros(out_dim))
    return HeadParams.from_store(store, prefix)


def head(cls: Tensor, params: HeadParams) -> Tensor:
    """LayerNorm then affine projection. Not L2-normalized."""
    normed = T.layer_norm(cls, params.norm_gamma, params.norm_beta)
    return T.add(T.matmul(normed, params.weight), params.bias)


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Cut B×H×W×3 images into B×N×(k·k·3) patch rows.

    Patches are in raster order over the patch grid; each row is the patch
    flattened in (row, column, channel) order.
    """
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeError(f"patchify: expected B×H×W×3 images, got {images.shape}")
    b, h, w, c = images.shape
    k = patch_size
    if h % k or w % k:
        raise ShapeError(f"patchify: image {h}×{w} not divisible by patch size {k}")
    grid = images.reshape(b, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(b, (h // k) * (w // k), k * k * c)


class ViTModel:
    """
    Vision Transformer whose every tensor lives in one ParameterStore.

    Registry names:
        patch_embed.weight / .bias, cls_token, pos_embed,
        blocks.{i}.ln1.gamma / .beta, blocks.{i}.attn.{wq,wk,wv,wo}.weight / .bias,
        blocks.{i}.ln2.gamma / .beta, blocks.{i}.mlp.{fc1,fc2}.weight / .bias,
        blocks.{i}.adapter.{down,up}.weight / .bias (when inserted),
        head.norm.gamma / .beta, head.proj.weight / .bias
    """

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        config.validate()
        self.config = config
        self.params = ParameterStore()
        self.adapter_layers: list[int] = []
        self.adapter_position = "sequential"
        self.adapter_site = "post"
        self._adapter_key: tuple[object, ...] | None = None
        self.prompt_store: PromptStore | None = None

        rng = np.random.default_rng(seed)
        d, std = config.hidden_dim, config.init_std
        hidden = config.mlp_ratio * d
        add = self.params.add
        add("patch_embed.weight", rng.normal(0.0, std, (config.patch_dim, d)))
        add("patch_embed.bias", np.zeros(d))
        add("cls_token", rng.normal(0.0, std, (1, d)))
        add("pos_embed", rng.normal(0.0, std, (config.num_patches + 1, d)))
        for i in range(config.layers):
            p = f"blocks.{i}"
            add(f"{p}.ln1.gamma", np.ones(d))
            add(f"{p}.ln1.beta", np.zeros(d))
            for proj in ("wq", "wk", "wv", "wo"):
                add(f"{p}.attn.{proj}.weight", rng.normal(0.0, std, (d, d)))
                add(f"{p}.attn.{proj}.bias", np.zeros(d))
            add(f"{p}.ln2.gamma", np.ones(d))
            add(f"{p}.ln2.beta", np.zeros(d))
            add(f"{p}.mlp.fc1.weight", rng.normal(0.0, std, (d, hidden)))
            add(f"{p}.mlp.fc1.bias", np.zeros(hidden))
            add(f"{p}.mlp.fc2.weight", rng.normal(0.0, std, (hidden, d)))
            add(f"{p}.mlp.fc2.bias", np.zeros(d))
        register_head(self.params, "head", d, config.head_out_dim, rng, std)

    @property
    def head_params(self) -> HeadParams:
        return HeadParams.from_store(self.params, "head")

    def insert_adapters(self, config: AdapterConfig, layers: list[int],
                        rng: np.random.Generator) -> None:
        key = adapter_config_key(config, layers)
        if key == self._adapter_key:
            return
        self.remove_adapters()
        for layer in layers:
            register_adapter(
                self.params, f"blocks.{layer}.adapter", self.config.hidden_dim,
                config.mid_dim, rng,
            )
        self.adapter_layers = list(layers)
        self.adapter_position = config.position
        self.adapter_site = config.site
        self._adapter_key = key

    def remove_adapters(self) -> None:
        for name in [n for n in self.params if ".adapter." in n]:
            self.params.remove(name)
        self.adapter_layers = []
        self._adapter_key = None

    def patchify(self, images: np.ndarray) -> Tensor:
        """
        Turn images into token sequences with CLS and position embeddings.

        Args:
            images: H×W×3 or B×H×W×3 array with values in [0, 1]

        Returns:
            (N+1)×D for a single image, B×(N+1)×D for a batch
        """
        single = images.ndim == 3
        batch = images[None] if single else images
        size = self.config.image_size
        if batch.ndim != 4 or batch.shape[1:] != (size, size, 3):
            raise ShapeError(
                f"patchify: expected images of {size}×{size}×3, got {images.shape}"
            )
        p = self.params
        patches = Tensor(extract_patches(batch, self.config.patch_size))
        embedded = T.add(T.matmul(patches, p["patch_embed.weight"]),
                         p["patch_embed.bias"])
        cls = T.expand(p["cls_token"], batch.shape[0])
        tokens = T.add(T.concat([cls, embedded], axis=1),
                       T.expand(p["pos_embed"], batch.shape[0]))
        if single:
            return T.reshape(tokens, tokens.shape[1:])
        return tokens

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return T.add(T.matmul(x, self.params[f"{prefix}.weight"]),
                     self.params[f"{prefix}.bias"])

    def attention_probs(self, h: Tensor, layer: int) -> tuple[Tensor, Tensor]:
        """Return softmax(QKᵀ/√d) and V, both B×heads×T×·."""
        b, t, d = h.shape
        heads = self.config.heads
        dh = d // heads
        prefix = f"blocks.{layer}.attn"

        def split(x: Tensor) -> Tensor:
            return T.transpose(T.reshape(x, (b, t, heads, dh)), (0, 2, 1, 3))

        q = split(self._linear(h, f"{prefix}.wq"))
        k = split(self._linear(h, f"{prefix}.wk"))
        v = split(self._linear(h, f"{prefix}.wv"))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        return T.softmax(scores, axis=-1), v

    def attention(self, h: Tensor, layer: int) -> Tensor:
        b, t, d = h.shape
        probs, v = self.attention_probs(h, layer)
        context = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
        return self._linear(context, f"blocks.{layer}.attn.wo")

    def mlp(self, h: Tensor, layer: int) -> Tensor:
        hidden = T.gelu(self._linear(h, f"blocks.{layer}.mlp.fc1"))
        return self._linear(hidden, f"blocks.{layer}.mlp.fc2")

    def _sublayer(self, x: Tensor, layer: int, site: str) -> Tensor:
        p = self.params
        prefix = f"blocks.{layer}"
        norm = "ln1" if site == "pre" else "ln2"
        normed = T.layer_norm(x, p[f"{prefix}.{norm}.gamma"], p[f"{prefix}.{norm}.beta"])
        out = self.attention(normed, layer) if site == "pre" else self.mlp(normed, layer)
        if layer in self.adapter_layers and self.adapter_site == site:
            params = AdapterParams.from_store(p, f"{prefix}.adapter")
            if self.adapter_position == "sequential":
                out = adapter_forward(out, params)
            else:
                out = T.add(out, adapter_delta(normed, params))
        return out

    def block(self, x: Tensor, layer: int) -> Tensor:
        """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
        x = T.add(x, self._sublayer(x, layer, "pre"))
        return T.add(x, self._sublayer(x, layer, "post"))

    def encode(self, tokens: Tensor,
               prompts_per_layer: Sequence[Tensor | None] | None = None) -> Tensor:
        """
        Run every block and return the final CLS rows (B×D).

        Args:
            tokens: B×T×D sequence from `patchify`
            prompts_per_layer: L entries; each None, n×D (shared by the
                batch) or B×n×D (per sample)

        Raises:
            ShapeError: On a wrong number of layers or prompt width ≠ D
        """
        layers = self.config.layers
        prompts = list(prompts_per_layer) if prompts_per_layer is not None else [None] * layers
        if len(prompts) != layers:
            raise ShapeError(f"encode: expected {layers} prompt entries, got {len(prompts)}")
        if tokens.ndim != 3:
            raise ShapeError(f"encode: expected B×T×D tokens, got {tokens.shape}")
        batch, length, width = tokens.shape

        x = tokens
        for layer, prompt in enumerate(prompts):
            if prompt is None or prompt.shape[-2] == 0:
                x = self.block(x, layer)
                continue
            if prompt.shape[-1] != width:
                raise ShapeError(
                    f"encode: prompt width {prompt.shape[-1]} at layer {layer} "
                    f"does not match hidden dim {width}"
                )
            if prompt.ndim == 2:
                prompt = T.expand(prompt, batch)
            elif prompt.shape[0] != batch:
                raise ShapeError(
                    f"encode: per-sample prompts {prompt.shape} at layer {layer} "
                    f"do not match batch {batch}"
                )
            out = self.block(T.concat([x, prompt], axis=1), layer)
            x = T.slice_axis(out, 1, 0, length)
        return T.reshape(T.slice_axis(x, 1, 0, 1), (batch, width))

    def embed(self, images: np.ndarray,
              prompts_per_layer: Sequence[Tensor | None] | None = None) -> Tensor:
        """Sample-tower embedding (head output, not normalized) for a batch."""
        return head(self.encode(self.patchify(images), prompts_per_layer),
                    self.head_params)


@dataclass
class ParamCount:
    total: int
    tunable: int

    @property
    def tunable_fraction(self) -> float:
        return self.tunable / self.total if self.total else 0.0


def count_params(model: ViTModel, freeze_mask: frozenset[str],
                 extra_stores: Sequence[CountsParameters] = ()) -> ParamCount:
    """
    Count scalar parameters of the backbone and any extra stores.

    Backbone tensors are tunable unless named in `freeze_mask`. Extra stores
    (prompts, class prompts, proxies, GRU weights) report their own split.
    """
    total = 0
    tunable = 0
    for name, tensor in model.params.items():
        total += tensor.size
        if name not in freeze_mask:
            tunable += tensor.size
    for store in extra_stores:
        store_total, store_tunable = store.count()
        total += store_total
        tunable += store_tunable
    return ParamCount(total=total, tunable=tunable)

"""
Semantic proxies.

Each class c owns a small set of class prompts t^c that are appended to the
first `cls_layers` blocks of a second forward pass through the shared
backbone (the proxy tower). The tower output, after its own head and L2
normalization, is a per-image proxy sample p^c. Batches feed these samples,
one at a time in a seeded order, into an accumulator (EMA or a GRU shared by
all classes) that keeps one semantic proxy P^c per class across iterations.
Before the loss, P is blended with randomly initialized bias proxies O:

    Q = normalize((1 - alpha) * P + alpha * O)

The accumulated P^c entering a batch is a constant: gradients reach class
prompts, the proxy head and GRU weights only through the current batch.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ProxyConfig
from .paging import PagingError
from .params import ParameterStore, uniform_fan
from .tensor import L2_NORMALIZE_EPS, Tensor
from .utils import DMLError
from .vit import HeadParams, ViTModel, head, register_head

logger = logging.getLogger(__name__)


class DegenerateProxyError(DMLError):
    """Raised when a proxy update or fusion would normalize a zero vector."""


class ClassPromptStore:
    """
    Per-class prompt tensors t^c of shape (cls_layers, m, D).

    Only resident classes have a live Tensor. Evicted classes keep a copy of
    their values in host memory until they are restored; the paging buffer
    decides which classes are resident.
    """

    def __init__(self, num_classes: int, layers: int, prompts: int, dim: int,
                 patch_dim: int, rng: np.random.Generator) -> None:
        self.num_classes = num_classes
        self.layers = layers
        self.prompts = prompts
        self.dim = dim
        self._resident: dict[int, Tensor] = {}
        self._offloaded: dict[int, np.ndarray] = {}
        for c in range(num_classes):
            self._resident[c] = Tensor(
                uniform_fan(rng, (layers, prompts, dim), patch_dim, dim),
                requires_grad=True,
                name=self.name(c),
            )

    @staticmethod
    def name(label: int) -> str:
        return f"proxy.class_prompts.{label}"

    @property
    def bytes_per_class(self) -> int:
        return self.layers * self.prompts * self.dim * np.dtype(np.float32).itemsize

    @property
    def resident_classes(self) -> list[int]:
        return list(self._resident)

    @property
    def resident_bytes(self) -> int:
        return sum(int(t.data.nbytes) for t in self._resident.values())

    def is_resident(self, label: int) -> bool:
        return label in self._resident

    def get(self, label: int) -> Tensor:
        try:
            return self._resident[label]
        except KeyError:
            raise PagingError(f"Class {label} prompts are not resident") from None

    def evict(self, label: int) -> np.ndarray:
        tensor = self.get(label)
        del self._resident[label]
        self._offloaded[label] = tensor.data.copy()
        return self._offloaded[label]

    def restore(self, label: int) -> Tensor:
        data = self._offloaded.pop(label)
        tensor = Tensor(data, requires_grad=True, name=self.name(label))
        self._resident[label] = tensor
        return tensor

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for label, tensor in self._resident.items():
            yield self.name(label), tensor

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        return self.items()

    def zero_grad(self) -> None:
        for tensor in self._resident.values():
            tensor.grad = None

    def count(self) -> tuple[int, int]:
        total = self.num_classes * self.layers * self.prompts * self.dim
        return total, total

    @property
    def nbytes(self) -> int:
        return self.resident_bytes

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {self.name(c): t.data.copy() for c, t in self._resident.items()}
        state.update({self.name(c): d.copy() for c, d in self._offloaded.items()})
        return dict(sorted(state.items(), key=lambda kv: int(kv[0].rsplit(".", 1)[1])))

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        shape = (self.layers, self.prompts, self.dim)
        for c in range(self.num_classes):
            value = np.asarray(state[self.name(c)])
            if value.shape != shape:
                raise ValueError(f"Shape mismatch for {self.name(c)}: {value.shape} vs {shape}")
            if c in self._resident:
                self._resident[c].data = value.astype(np.float32).copy()
            else:
                self._offloaded[c] = value.astype(np.float32).copy()


@dataclass
class GRUWeights:
    """One weight set shared by every class (row-vector convention)."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str = "proxy.gru") -> GRUWeights:
        return cls(*(store[f"{prefix}.{name}"] for name in (
            "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h",
        )))

    @classmethod
    def zeros(cls, dim: int) -> GRUWeights:
        square = [Tensor(np.zeros((dim, dim)), requires_grad=True) for _ in range(6)]
        bias = [Tensor(np.zeros(dim), requires_grad=True) for _ in range(3)]
        return cls(square[0], square[1], bias[0], square[2], square[3], bias[1],
                   square[4], square[5], bias[2])


def register_gru(store: ParameterStore, dim: int, rng: np.random.Generator,
                 prefix: str = "proxy.gru") -> GRUWeights:
    for gate in ("z", "r", "h"):
        store.add(f"{prefix}.w_{gate}", uniform_fan(rng, (dim, dim), dim, dim))
        store.add(f"{prefix}.u_{gate}", uniform_fan(rng, (dim, dim), dim, dim))
        store.add(f"{prefix}.b_{gate}", np.zeros(dim))
    return GRUWeights.from_store(store, prefix)


def _normalize_or_raise(vector: Tensor, what: str) -> Tensor:
    norms = np.linalg.norm(vector.data.astype(np.float64), axis=-1)
    if np.any(norms <= L2_NORMALIZE_EPS):
        raise DegenerateProxyError(f"{what} produced a zero-norm vector")
    return T.l2_normalize(vector, axis=-1)


def ema_update(previous: Tensor, sample: Tensor, ema_lambda: float,
               textbook: bool = False) -> Tensor:
    """
    P_next = normalize(P_prev + (1 - lambda) * p).

    With `textbook` the previous proxy is scaled as well:
    normalize(lambda * P_prev + (1 - lambda) * p).

    Raises:
        DegenerateProxyError: If the sum before normalization is zero
    """
    kept = T.scale(previous, ema_lambda) if textbook else previous
    return _normalize_or_raise(T.add(kept, T.scale(sample, 1.0 - ema_lambda)), "ema_update")


def gru_update(previous: Tensor, sample: Tensor, weights: GRUWeights,
               kind: str = "gru_relu") -> Tensor:
    """
    One gated update of a semantic proxy.

        z = sigmoid(p W_z + P U_z + b_z)
        r = sigmoid(p W_r + P U_r + b_r)
        n = phi(p W_h + r * (P U_h) + b_h)     phi = relu or tanh
        P_next = normalize((1 - z) * P + z * n)

    Raises:
        DegenerateProxyError: If the gated sum before normalization is zero
    """
    def gate(w: Tensor, u: Tensor, b: Tensor) -> Tensor:
        return T.sigmoid(T.add(T.add(T.matmul(sample, w), T.matmul(previous, u)), b))

    z = gate(weights.w_z, weights.u_z, weights.b_z)
    r = gate(weights.w_r, weights.u_r, weights.b_r)
    candidate = T.add(
        T.add(T.matmul(sample, weights.w_h), T.mul(r, T.matmul(previous, weights.u_h))),
        weights.b_h,
    )
    candidate = T.relu(candidate) if kind == "gru_relu" else T.tanh(candidate)
    blended = T.add(T.mul(T.scale(z, -1.0, 1.0), previous), T.mul(z, candidate))
    return _normalize_or_raise(blended, "gru_update")


def fuse_bias(semantic: Tensor, bias: Tensor, alpha: float) -> Tensor:
    """
    Q = normalize((1 - alpha) * P + alpha * O), row-wise.

    Raises:
        DegenerateProxyError: If any fused row has zero norm
    """
    mixed = T.add(T.scale(semantic, 1.0 - alpha), T.scale(bias, alpha))
    return _normalize_or_raise(mixed, "fuse_bias")


class ProxyState:
    """
    Everything the loss side owns: bias proxies O, the semantic proxies P,
    and, when semantic proxies are enabled, the proxy head, the shared GRU
    and the class prompt store.

    Parameter names:
        proxy.bias                         O, C × D'
        proxy.head.norm.gamma / .beta      proxy tower head
        proxy.head.proj.weight / .bias
        proxy.gru.{w,u,b}_{z,r,h}          shared GRU (gru_* accumulators)
        proxy.class_prompts.{c}            t^c, cls_layers × m × D
    """

    def __init__(self, config: ProxyConfig, num_classes: int, model: ViTModel,
                 seed: int = 0) -> None:
        self.config = config
        self.num_classes = num_classes
        self.dim = model.config.head_out_dim
        self.degenerate_updates = 0
        self.logger = logging.getLogger(__name__)
        self.store = ParameterStore()
        self.class_prompts: ClassPromptStore | None = None

        rng = np.random.default_rng([seed, 0x9C])
        self.store.add(
            "proxy.bias",
            rng.normal(0.0, 1.0 / np.sqrt(self.dim), (num_classes, self.dim)),
        )
        bias = self.store["proxy.bias"].data.astype(np.float64)
        self.semantic = (bias / np.linalg.norm(bias, axis=1, keepdims=True)).astype(
            np.float32
        )

        if not config.enabled:
            return
        if config.ablation_mode == "full":
            backbone_head = model.head_params
            register_head(self.store, "proxy.head", model.config.hidden_dim, self.dim,
                          rng, model.config.init_std)
            proxy_head = self.head_params
            for mine, theirs in zip(
                (proxy_head.norm_gamma, proxy_head.norm_beta, proxy_head.weight, proxy_head.bias),
                (backbone_head.norm_gamma, backbone_head.norm_beta,
                 backbone_head.weight, backbone_head.bias),
            ):
                mine.data = theirs.data.copy()
            if config.cls_layers > 0 and config.num_prompts > 0:
                self.class_prompts = ClassPromptStore(
                    num_classes, config.cls_layers, config.num_prompts,
                    model.config.hidden_dim, model.config.patch_dim, rng,
                )
        if config.accumulator != "ema":
            register_gru(self.store, self.dim, rng)

    @property
    def enabled(self) -> bool:
        return self.config.enabled

    @property
    def head_params(self) -> HeadParams | None:
        if "proxy.head.proj.weight" not in self.store:
            return None
        return HeadParams.from_store(self.store, "proxy.head")

    @property
    def gru(self) -> GRUWeights | None:
        if "proxy.gru.w_z" not in self.store:
            return None
        return GRUWeights.from_store(self.store)

    @property
    def bias(self) -> Tensor:
        return self.store["proxy.bias"]

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.store.trainable()
        if self.class_prompts is not None:
            yield from self.class_prompts.trainable()

    def zero_grad(self) -> None:
        self.store.zero_grad()
        if self.class_prompts is not None:
            self.class_prompts.zero_grad()

    def count(self) -> tuple[int, int]:
        total, tunable = self.store.count()
        if self.class_prompts is not None:
            extra_total, extra_tunable = self.class_prompts.count()
            total += extra_total
            tunable += extra_tunable
        return total, tunable

    @property
    def nbytes(self) -> int:
        size = self.store.nbytes + int(self.semantic.nbytes)
        if self.class_prompts is not None:
            size += self.class_prompts.resident_bytes
        return size

    def update(self, previous: Tensor, sample: Tensor) -> Tensor:
        """Apply the configured accumulator to one proxy sample."""
        if self.config.accumulator == "ema":
            return ema_update(previous, sample, self.config.ema_lambda,
                              self.config.ema_textbook)
        gru = self.gru
        assert gru is not None
        return gru_update(previous, sample, gru, self.config.accumulator)

    def fused(self, fresh: Mapping[int, Tensor] | None = None) -> Tensor:
        """
        Fused proxies Q for every class.

        Rows listed in `fresh` are this batch's accumulated proxies and keep
        their graph; every other row of P enters as a constant, so for those
        classes the loss gradient reaches only O.
        """
        if not self.enabled:
            return T.l2_normalize(self.bias, axis=-1)
        semantic = self.semantic_tensor(fresh or {})
        return fuse_bias(semantic, self.bias, self.config.alpha)

    def semantic_tensor(self, fresh: Mapping[int, Tensor]) -> Tensor:
        if not fresh:
            return Tensor(self.semantic)
        pieces: list[Tensor] = []
        start = 0
        for label in sorted(fresh):
            if label > start:
                pieces.append(Tensor(self.semantic[start:label]))
            pieces.append(T.reshape(fresh[label], (1, self.dim)))
            start = label + 1
        if start < self.num_classes:
            pieces.append(Tensor(self.semantic[start:]))
        return pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)

    def commit(self, fresh: Mapping[int, Tensor]) -> None:
        """Store this batch's accumulated rows as next iteration's constants."""
        for label, row in fresh.items():
            self.semantic[label] = row.data.reshape(self.dim)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.store.state_dict()
        if self.class_prompts is not None:
            state.update(self.class_prompts.state_dict())
        state["proxy.semantic"] = self.semantic.copy()
        state["proxy.degenerate_updates"] = np.array([self.degenerate_updates],
                                                     dtype=np.int64)
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.store.load_state_dict(dict(state))
        if self.class_prompts is not None:
            self.class_prompts.load_state_dict(state)
        semantic = np.asarray(state["proxy.semantic"], dtype=np.float32)
        if semantic.shape != self.semantic.shape:
            raise ValueError(
                f"Shape mismatch for proxy.semantic: {semantic.shape} vs {self.semantic.shape}"
            )
        self.semantic = semantic.copy()
        if "proxy.degenerate_updates" in state:
            self.degenerate_updates = int(np.asarray(state["proxy.degenerate_updates"])[0])


def class_prompts_per_layer(store: ClassPromptStore, labels: Sequence[int],
                            layers: int) -> list[Tensor | None]:
    """Per-sample class prompts, B × m × D for each of the first cls_layers blocks."""
    per_layer: list[Tensor | None] = [None] * layers
    tensors = {label: store.get(label) for label in sorted(set(labels))}
    for layer in range(min(store.layers, layers)):
        rows = {
            label: T.reshape(T.slice_axis(t, 0, layer, layer + 1),
                             (1, store.prompts, store.dim))
            for label, t in tensors.items()
        }
        per_layer[layer] = T.concat([rows[label] for label in labels], axis=0)
    return per_layer


def tower_prompts(encoder_prompts: Sequence[Tensor | None] | None,
                  class_prompts: Sequence[Tensor | None], batch: int) -> list[Tensor | None]:
    """Concatenate shared encoder prompts and per-sample class prompts per layer."""
    combined: list[Tensor | None] = []
    encoder = list(encoder_prompts) if encoder_prompts is not None else [None] * len(class_prompts)
    for shared, per_sample in zip(encoder, class_prompts):
        if shared is None or shared.shape[0] == 0:
            combined.append(per_sample)
        elif per_sample is None:
            combined.append(shared)
        else:
            combined.append(T.concat([T.expand(shared, batch), per_sample], axis=1))
    return combined


def generate_proxy(model: ViTModel, tokens: Tensor, labels: Sequence[int],
                   encoder_prompts: Sequence[Tensor | None] | None,
                   class_prompts: ClassPromptStore | None,
                   proxy_head: HeadParams) -> Tensor:
    """
    Proxy-tower forward: one L2-normalized proxy sample per image.

    Args:
        model: Shared backbone
        tokens: B × T × D output of `model.patchify`
        labels: Class of each image; every class must be resident
        encoder_prompts: The sample tower's deep prompts, or None
        class_prompts: Store holding t^c, or None for m = 0
        proxy_head: Head parameters of the proxy tower

    Raises:
        PagingError: If a label's class prompts are not resident
    """
    layers = model.config.layers
    batch = tokens.shape[0]
    if class_prompts is not None:
        per_sample = class_prompts_per_layer(class_prompts, labels, layers)
    else:
        per_sample = [None] * layers
    prompts = tower_prompts(encoder_prompts, per_sample, batch)
    return T.l2_normalize(head(model.encode(tokens, prompts), proxy_head), axis=-1)


def proxy_samples(model: ViTModel, tokens: Tensor, labels: Sequence[int],
                  encoder_prompts: Sequence[Tensor | None] | None,
                  embeddings: Tensor, state: ProxyState) -> Tensor:
    """
    Proxy samples for a batch under the configured ablation mode.

    `embeddings` are the batch's L2-normalized sample-tower outputs, reused
    directly by the encoder-sharing modes.
    """
    mode = state.config.ablation_mode
    if mode == "shared_encoder":
        return embeddings
    if mode == "fixed_encoder":
        return T.stop_gradient(embeddings)
    if mode == "sample":
        return T.l2_normalize(head(model.encode(tokens), model.head_params), axis=-1)
    proxy_head = state.head_params
    assert proxy_head is not None
    shared = encoder_prompts if state.config.include_encoder_prompts else None
    return generate_proxy(model, tokens, labels, shared, state.class_prompts, proxy_head)


def accumulate_batch(samples: Tensor, labels: Sequence[int], state: ProxyState,
                     rng: np.random.Generator) -> dict[int, Tensor]:
    """
    Feed each batch class's proxy samples through the accumulator.

    Classes are visited in ascending label order; within a class the samples
    are fed one at a time in an order drawn from `rng`. The accumulated proxy
    entering the batch is a constant. Classes absent from the batch are not
    touched.

    Returns:
        Updated proxy row (1 × D') per batch class, still attached to the graph
    """
    label_array = np.asarray(labels)
    fresh: dict[int, Tensor] = {}
    for label in sorted(set(int(c) for c in label_array)):
        positions = np.flatnonzero(label_array == label)
        if positions.size == 0:
            continue
        current = Tensor(state.semantic[label:label + 1])
        for index in rng.permutation(positions):
            sample = T.slice_axis(samples, 0, int(index), int(index) + 1)
            try:
                current = state.update(current, sample)
            except DegenerateProxyError:
                state.degenerate_updates += 1
                state.logger.warning(
                    "Degenerate proxy update for class %d; keeping previous proxy", label
                )
        fresh[label] = current
    return fresh

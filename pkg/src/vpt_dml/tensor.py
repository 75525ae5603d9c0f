"""
Minimal reverse-mode automatic differentiation over dense arrays.

A `Tensor` wraps a numpy buffer of rank ≤ 4 plus an optional gradient slot.
Kernels compute their forward value eagerly and, while a `Graph` is active,
append a `Node` holding the backward rule. `Graph.backward(loss)` walks the
recorded nodes in exact reverse insertion order and accumulates gradients
into every tensor that requires them.

Storage is float32 by default. Reductions (matmul, mean, norms, softmax
denominators) accumulate in float64 and round back once. `precision()`
switches storage to float64, which the gradient checker uses so that its
tolerances measure the backward rules rather than float32 rounding.

Only one implicit broadcast exists: adding a bias vector over the last axis.
Every other shape mismatch raises `ShapeError` naming the kernel and shapes.
"""

from __future__ import annotations

import builtins
import contextvars
import logging
import math
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np

from .utils import DMLError

logger = logging.getLogger(__name__)

MAX_RANK = 4
LAYER_NORM_EPS = 1e-6
L2_NORMALIZE_EPS = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

_dtype: contextvars.ContextVar[type[np.floating[Any]]] = contextvars.ContextVar(
    "dml_dtype", default=np.float32
)
_active_graph: contextvars.ContextVar[Graph | None] = contextvars.ContextVar(
    "dml_graph", default=None
)
_debug = False


class ShapeError(DMLError):
    """Raised when a kernel receives operands of incompatible shapes."""


class AxisError(DMLError):
    """Raised when a kernel is asked to work along a non-existent axis."""


class NonFiniteError(DMLError):
    """Raised when finite inputs produce NaN/Inf (debug checks only)."""


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors."""
    dtypes = {"float32": np.float32, "float64": np.float64}
    if name not in dtypes:
        raise ValueError(f"Unknown precision: {name}")
    token = _dtype.set(dtypes[name])
    try:
        yield
    finally:
        _dtype.reset(token)


def storage_dtype() -> type[np.floating[Any]]:
    return _dtype.get()


def set_debug(enabled: bool) -> None:
    """Enable NaN/Inf checks after every kernel."""
    global _debug
    _debug = enabled


class Tensor:
    """
    A shape-typed float array with an optional gradient slot.

    Attributes:
        data: Row-major numpy buffer
        grad: Gradient buffer of identical shape, or None until written
        requires_grad: Whether backward should accumulate into `grad`
        name: Optional label used in error messages and registries
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        array = np.array(data, dtype=storage_dtype(), order="C")
        if array.ndim > MAX_RANK:
            raise ShapeError(
                f"Tensor rank {array.ndim} exceeds the maximum of {MAX_RANK}"
            )
        self.data: np.ndarray = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> Tensor:
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, gradient: np.ndarray) -> None:
        gradient = np.asarray(gradient).astype(self.data.dtype, copy=False)
        if gradient.shape != self.data.shape:
            raise ShapeError(
                f"gradient of shape {gradient.shape} does not match tensor "
                f"shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = gradient.copy()
        else:
            self.grad = self.grad + gradient

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Node:
    """One recorded operation: which tensors went in, which came out, and how
    to route the output gradient back to the inputs."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Graph:
    """
    Ordered record of operations.

    Use as a context manager; kernels executed inside the block are recorded
    when at least one input requires a gradient. Outside any graph kernels
    run forward only.

    Example:
        >>> with Graph() as graph:
        ...     loss = mean(relu(x))
        >>> graph.backward(loss)
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token: contextvars.Token[Graph | None] | None = None

    def __enter__(self) -> Graph:
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _active_graph.reset(self._token)
            self._token = None

    @staticmethod
    def current() -> Graph | None:
        return _active_graph.get()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate in reverse insertion order."""
        if not loss.requires_grad:
            logger.debug("backward called on a tensor that requires no gradient")
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            grads = node.backward(upstream)
            for tensor, gradient in zip(node.inputs, grads):
                if gradient is None or not tensor.requires_grad:
                    continue
                tensor.accumulate_grad(gradient)


def _result(op: str, value: np.ndarray, inputs: tuple[Tensor, ...],
            rule: BackwardRule) -> Tensor:
    out = Tensor(value)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _debug and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    graph = _active_graph.get()
    if graph is not None and out.requires_grad:
        graph.record(Node(op, inputs, out, rule))
    return out


def _f64(array: np.ndarray) -> np.ndarray:
    return array.astype(np.float64, copy=False)


def _check_axis(op: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise AxisError(f"{op}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_bias(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1] and a.ndim > 1


def _bias_grad(g: np.ndarray) -> np.ndarray:
    return _f64(g).reshape(-1, g.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------------------
# Elementwise and linear kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    `a` has shape (..., n, k). `b` is either a (k, m) weight shared across
    the leading axes of `a`, or (..., k, m) with the same leading axes.
    """
    batched_b = b.ndim > 2
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.shape[-1] != b.shape[-2]
        or (batched_b and a.shape[:-2] != b.shape[:-2])
    ):
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    a64, b64 = _f64(a.data), _f64(b.data)
    value = a64 @ b64

    def rule(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        g64 = _f64(g)
        ga = g64 @ np.swapaxes(b64, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if batched_b:
                gb = np.swapaxes(a64, -1, -2) @ g64
            else:
                gb = a64.reshape(-1, a.shape[-1]).T @ g64.reshape(-1, b.shape[-1])
        return ga, gb

    return _result("matmul", value, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a bias vector over the last axis of `a`."""
    if _is_bias(a, b):
        return _result(
            "add", a.data + b.data, (a, b), lambda g: (g, _bias_grad(g))
        )
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference; `b` may be a bias vector over the last axis."""
    if _is_bias(a, b):
        return _result(
            "sub", a.data - b.data, (a, b), lambda g: (g, -_bias_grad(g))
        )
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of equally shaped tensors."""
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _result(
        "mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data)
    )


def scale(x: Tensor, factor: float, offset: float = 0.0) -> Tensor:
    """Affine map `factor * x + offset` with a scalar factor and offset."""
    value = factor * _f64(x.data) + offset
    return _result("scale", value, (x,), lambda g: (factor * _f64(g),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x64 = _f64(x.data)
    inner = _GELU_C * (x64 + _GELU_K * x64**3)
    t = np.tanh(inner)
    value = 0.5 * x64 * (1.0 + t)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x64**2)
        derivative = 0.5 * (1.0 + t) + 0.5 * x64 * (1.0 - t**2) * d_inner
        return (_f64(g) * derivative,)

    return _result("gelu", value, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * _f64(x.data)))
    return _result("sigmoid", y, (x,), lambda g: (_f64(g) * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(_f64(x.data))
    return _result("tanh", y, (x,), lambda g: (_f64(g) * (1.0 - y**2),))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; nothing flows back through it."""
    return Tensor(x.data, requires_grad=False, name=x.name)


# ---------------------------------------------------------------------------
# Structural kernels
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors given")
    first = tensors[0]
    axis = _check_axis("concat", first, axis)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
        ):
            raise ShapeError(f"concat: shape mismatch {first.shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    value = np.concatenate([t.data for t in tensors], axis=axis)

    def rule(g: np.ndarray) -> list[np.ndarray]:
        return list(np.split(g, bounds, axis=axis))

    return _result("concat", value, tuple(tensors), rule)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Keep indices [start, stop) along `axis`."""
    axis = _check_axis("slice", x, axis)
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(
            f"slice: range [{start}, {stop}) invalid for axis {axis} of {x.shape}"
        )
    index = tuple(
        builtins.slice(start, stop) if i == axis else builtins.slice(None)
        for i in range(x.ndim)
    )
    shape = x.shape

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _result("slice", x.data[index], (x,), rule)


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather entries along `axis`; repeated indices accumulate in backward."""
    axis = _check_axis("take", x, axis)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ShapeError(f"take: index out of range for axis {axis} of {x.shape}")
    shape = x.shape

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(_f64(g), axis, 0))
        return (full,)

    return _result("take", np.take(x.data, idx, axis=axis), (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    target = tuple(shape)
    if math.prod(target) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {target}")
    source = x.shape
    return _result(
        "reshape", x.data.reshape(target), (x,), lambda g: (g.reshape(source),)
    )


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    order = tuple(axes)
    if sorted(order) != list(range(x.ndim)):
        raise AxisError(f"transpose: invalid axes {order} for shape {x.shape}")
    inverse = tuple(int(i) for i in np.argsort(order))
    return _result(
        "transpose",
        np.transpose(x.data, order),
        (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def expand(x: Tensor, count: int) -> Tensor:
    """Repeat `x` along a new leading axis of length `count`."""
    if x.ndim + 1 > MAX_RANK:
        raise ShapeError(f"expand: result rank exceeds {MAX_RANK} for {x.shape}")
    value = np.broadcast_to(x.data, (count, *x.shape))
    return _result("expand", value, (x,), lambda g: (_f64(g).sum(axis=0),))


# ---------------------------------------------------------------------------
# Reductions and normalizations
# ---------------------------------------------------------------------------


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = x.shape
        return _result(
            "sum",
            np.array(_f64(x.data).sum()),
            (x,),
            lambda g: (np.full(shape, float(g)),),
        )
    axis = _check_axis("sum", x, axis)
    return _result(
        "sum",
        _f64(x.data).sum(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape),),
    )


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        count = x.size
        shape = x.shape
        return _result(
            "mean",
            np.array(_f64(x.data).mean()),
            (x,),
            lambda g: (np.full(shape, float(g) / count),),
        )
    axis = _check_axis("mean", x, axis)
    count = x.shape[axis]
    return _result(
        "mean",
        _f64(x.data).mean(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(_f64(g), axis) / count, x.shape),),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", x, axis)
    x64 = _f64(x.data)
    shifted = np.exp(x64 - x64.max(axis=axis, keepdims=True))
    y = shifted / shifted.sum(axis=axis, keepdims=True)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        g64 = _f64(g)
        return (y * (g64 - (g64 * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("log_softmax", x, axis)
    x64 = _f64(x.data)
    peak = x64.max(axis=axis, keepdims=True)
    log_z = peak + np.log(np.exp(x64 - peak).sum(axis=axis, keepdims=True))
    y = x64 - log_z

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        g64 = _f64(g)
        return (g64 - np.exp(y) * g64.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", y, (x,), rule)


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS
) -> Tensor:
    """Normalize over the last axis, then apply the affine `gamma`, `beta`."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layer_norm: shape mismatch {x.shape} vs gamma {gamma.shape} / "
            f"beta {beta.shape}"
        )
    x64 = _f64(x.data)
    mu = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mu
    rstd = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * rstd
    g64 = _f64(gamma.data)
    value = x_hat * g64 + _f64(beta.data)

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad = _f64(g)
        d_hat = grad * g64
        dx = rstd * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        d_gamma = (grad * x_hat).reshape(-1, width).sum(axis=0)
        d_beta = grad.reshape(-1, width).sum(axis=0)
        return dx, d_gamma, d_beta

    return _result("layer_norm", value, (x, gamma, beta), rule)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = L2_NORMALIZE_EPS) -> Tensor:
    """Scale slices along `axis` to unit L2 norm (norms below eps use eps)."""
    if eps <= 0:
        raise ValueError("l2_normalize: eps must be positive")
    axis = _check_axis("l2_normalize", x, axis)
    x64 = _f64(x.data)
    norm = np.sqrt((x64**2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x64 / denom

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        g64 = _f64(g)
        projected = g64 - y * (g64 * y).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, projected, g64) / denom,)

    return _result("l2_normalize", y, (x,), rule)


def log1p_exp_sum(
    x: Tensor, axis: int, mask: np.ndarray | None = None
) -> Tensor:
    """
    Stable `log(1 + Σ exp(x))` along `axis`, optionally over a 0/1 mask.

    An all-zero mask slice yields exactly 0 (an empty sum).
    """
    axis = _check_axis("log1p_exp_sum", x, axis)
    x64 = _f64(x.data)
    keep = np.ones_like(x64, dtype=bool) if mask is None else np.asarray(mask, bool)
    if keep.shape != x64.shape:
        raise ShapeError(
            f"log1p_exp_sum: shape mismatch {x.shape} vs mask {keep.shape}"
        )
    masked = np.where(keep, x64, -np.inf)
    peak = np.maximum(masked.max(axis=axis, keepdims=True), 0.0)
    terms = np.where(keep, np.exp(np.where(keep, x64, 0.0) - peak), 0.0)
    total = np.exp(-peak) + terms.sum(axis=axis, keepdims=True)
    out_keep = peak + np.log(total)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        weights = np.where(keep, np.exp(np.where(keep, x64, 0.0) - out_keep), 0.0)
        return (np.expand_dims(_f64(g), axis) * weights,)

    return _result("log1p_exp_sum", np.squeeze(out_keep, axis=axis), (x,), rule)

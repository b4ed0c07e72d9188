"""
Dense tensors with reverse-mode differentiation, plus the Adam optimizer.

A `Tensor` wraps a numpy array. Operations are `Function` subclasses; applying
one records the function on the output tensor so that `backward()` can walk the
graph in reverse topological order. Every forward and backward result is checked
for NaN/Inf and a `NonFiniteError` is raised instead of propagating it.

There is no implicit broadcasting: elementwise operands must have identical
shapes, except that a 0-d tensor (or a Python number) pairs with anything.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import config
from .errors import ContractError, DimensionError, NonFiniteError

_DTYPES = {32: np.float32, 64: np.float64}


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = _DTYPES.get(config.PRECISION, np.float32)
        self.grad_enabled = True


_state = _State()


def default_dtype() -> type:
    return _state.dtype


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with (32 or 64)."""
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    prev = _state.dtype
    _state.dtype = _DTYPES[bits]
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording a graph."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _ensure_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s)")


class Tensor:
    """A shaped real array that may take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_ctx")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[type] = None,
    ):
        arr = np.array(data, dtype=dtype or default_dtype())
        _ensure_finite(arr, name or "tensor")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._ctx: Optional[Function] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, ctx: Optional["Function"]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = ctx is not None
        out.name = None
        out._ctx = ctx
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routes end in the Function classes below
    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, _lift(other, self))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(_lift(other, self), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, _lift(other, self))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(_lift(other, self), self)

    def __neg__(self) -> "Tensor":
        return Mul.apply(self, _lift(-1.0, self))

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def mean(self) -> "Tensor":
        return Mean.apply(self)


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


class Function:
    """
    Base class for differentiable operations.

    `forward` receives the parents' arrays and returns the output array;
    `backward` receives dL/d(output) and returns one gradient per parent
    (None where a parent takes no gradient).
    """

    name = "function"

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        _ensure_finite(out, f"{cls.name} forward")
        track = _state.grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor._from_op(out, fn if track else None)


def _same_shape_or_scalar(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


class Add(Function):
    name = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _same_shape_or_scalar(a, b, self.name)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _same_shape_or_scalar(a, b, self.name)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _same_shape_or_scalar(a, b, self.name)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray):
        return _reduce_to(grad * self.b, self.a.shape), _reduce_to(grad * self.a, self.b.shape)


class Sum(Function):
    name = "sum"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad: np.ndarray):
        return (np.full(self.shape, grad, dtype=grad.dtype),)


class Mean(Function):
    name = "mean"

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.size == 0:
            raise ContractError("mean of an empty tensor")
        self.shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad: np.ndarray):
        n = int(np.prod(self.shape))
        return (np.full(self.shape, grad / n, dtype=grad.dtype),)


class ReLU(Function):
    name = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray):
        return (grad * self.mask,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x: np.ndarray) -> np.ndarray:
        info = np.finfo(x.dtype)
        # saturated outputs stay strictly inside (0, 1)
        out = np.clip(0.5 * (1.0 + np.tanh(0.5 * x)), info.tiny, 1.0 - info.epsneg)
        self.out = out.astype(x.dtype, copy=False)
        return self.out

    def backward(self, grad: np.ndarray):
        return (grad * self.out * (1.0 - self.out),)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, x: np.ndarray) -> np.ndarray:
        if np.any(x <= 0):
            raise ContractError("sqrt needs strictly positive input")
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad: np.ndarray):
        return (grad * 0.5 / self.out,)


class ConcatChannels(Function):
    name = "concat_channels"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != b.ndim or a.ndim < 3:
            raise DimensionError(f"concat_channels: need matching rank >= 3, got {a.shape} and {b.shape}")
        if a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
            raise DimensionError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
        self.split = a.shape[-3]
        return np.concatenate([a, b], axis=-3)

    def backward(self, grad: np.ndarray):
        return grad[..., : self.split, :, :], grad[..., self.split :, :, :]


class PadEdge(Function):
    """Replicate-pad the last two axes by `width` on every side."""

    name = "pad_edge"

    def forward(self, x: np.ndarray, width: int = 1) -> np.ndarray:
        if x.ndim < 2:
            raise DimensionError(f"pad_edge: need at least 2 axes, got {x.shape}")
        h, w = x.shape[-2:]
        # one-hot selection matrices make the adjoint a pair of matmuls
        self.rows = _edge_selector(h, width, x.dtype)
        self.cols = _edge_selector(w, width, x.dtype)
        pads = [(0, 0)] * (x.ndim - 2) + [(width, width), (width, width)]
        return np.pad(x, pads, mode="edge")

    def backward(self, grad: np.ndarray):
        return (self.rows.T @ grad @ self.cols,)


def _edge_selector(n: int, width: int, dtype: np.dtype) -> np.ndarray:
    idx = np.clip(np.arange(n + 2 * width) - width, 0, n - 1)
    sel = np.zeros((n + 2 * width, n), dtype=dtype)
    sel[np.arange(n + 2 * width), idx] = 1
    return sel


class Conv2d(Function):
    """Stride-1 cross-correlation with zero padding over [N, C, H, W] (or [C, H, W])."""

    name = "conv2d"

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int = 0) -> np.ndarray:
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise DimensionError(f"conv2d: weight must be [Cout, Cin, k, k] with odd k, got {w.shape}")
        self.squeeze = x.ndim == 3
        x4 = x[None] if self.squeeze else x
        if x4.ndim != 4:
            raise DimensionError(f"conv2d: input must be [N, C, H, W] or [C, H, W], got {x.shape}")
        if x4.shape[1] != w.shape[1]:
            raise DimensionError(f"conv2d: input has {x4.shape[1]} channels, weight expects {w.shape[1]}")
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} output channels")
        k = w.shape[2]
        if not 0 <= padding <= k - 1:
            raise ContractError(f"conv2d: padding must be in [0, {k - 1}], got {padding}")
        if x4.shape[2] + 2 * padding < k or x4.shape[3] + 2 * padding < k:
            raise DimensionError(f"conv2d: input {x.shape} smaller than kernel {k}x{k}")
        self.k, self.padding, self.w = k, padding, w
        xp = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        self.windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, Cin, Ho, Wo, k, k
        out = np.tensordot(self.windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, Cout
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        out = np.ascontiguousarray(out, dtype=x.dtype)
        return out[0] if self.squeeze else out

    def backward(self, grad: np.ndarray):
        g = grad[None] if self.squeeze else grad
        gw = np.tensordot(g, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3))
        if not self.parents[0].requires_grad:
            return None, gw.astype(g.dtype, copy=False), gb
        q = self.k - 1 - self.padding
        gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q)))
        gwin = sliding_window_view(gp, (self.k, self.k), axis=(2, 3))
        gx = np.tensordot(gwin, self.w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        return (gx[0] if self.squeeze else gx), gw.astype(g.dtype, copy=False), gb


# ----- functional surface ------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: Optional[int] = None) -> Tensor:
    """Cross-correlate `x` with `weight`; `padding` defaults to (k-1)/2, which keeps H and W."""
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[0]), dtype=weight.dtype)
    if padding is None:
        padding = (weight.shape[-1] - 1) // 2
    return Conv2d.apply(x, weight, bias, padding=padding)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def activation(x: Tensor, kind: Literal["relu", "sigmoid"]) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def elementwise(a: Tensor, b: Tensor, kind: Literal["add", "sub", "mul"]) -> Tensor:
    ops = {"add": Add, "sub": Sub, "mul": Mul}
    if kind not in ops:
        raise ContractError(f"unknown elementwise op {kind!r}")
    return ops[kind].apply(a, b)


def reduce(x: Tensor, kind: Literal["mean", "sum"]) -> Tensor:
    if kind == "mean":
        return Mean.apply(x)
    if kind == "sum":
        return Sum.apply(x)
    raise ContractError(f"unknown reduction {kind!r}")


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return ConcatChannels.apply(a, b)


def pad_edge(x: Tensor, width: int = 1) -> Tensor:
    return PadEdge.apply(x, width=width)


# ----- reverse mode ------------------------------------------------------------


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited: set[int] = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """
    Accumulate d(root)/d(leaf) for every leaf that requires a gradient.

    The result maps each leaf to its gradient (also stored on `leaf.grad`).
    Leaves passed in `leaves` but unreachable from `root` get zeros.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    result: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            if node.requires_grad:
                node.grad = g
                result[node] = g
            continue
        parent_grads = node._ctx.backward(g)
        for parent, pg in zip(node._ctx.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"{node._ctx.name} backward: gradient shape {pg.shape} != value shape {parent.shape}"
                )
            _ensure_finite(pg, f"{node._ctx.name} backward")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg.astype(parent.dtype, copy=True) if prev is None else prev + pg
    for leaf in leaves or ():
        if leaf not in result:
            leaf.grad = np.zeros_like(leaf.data)
            result[leaf] = leaf.grad
    return result


# ----- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    """Shared step counter plus first/second moments keyed by parameter name."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> AdamState:
    """
    One bias-corrected Adam update, in place on every parameter in `params`.

    `state.step` advances by exactly one per call; moments are created lazily
    with the parameter's shape and dtype. Nothing is written unless every new
    value is finite.
    """
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    staged: Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for name, param in params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise DimensionError(f"adam: gradient for {name} has shape {g.shape}, parameter {param.shape}")
        dt = param.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = (state.beta1 * m + (1.0 - state.beta1) * g).astype(dt, copy=False)
        v = (state.beta2 * v + (1.0 - state.beta2) * (g * g)).astype(dt, copy=False)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        new = (param.data - update).astype(dt, copy=False)
        _ensure_finite(new, f"adam update of {name}")
        staged[name] = (new, m, v)
    for name, (new, m, v) in staged.items():
        params[name].data = new
        state.m[name] = m
        state.v[name] = v
    state.step = t
    return state

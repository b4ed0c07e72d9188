"""
Finite-difference oracle for the reverse-mode engine.

The analytic gradient is taken at the requested precision; the central
differences are always evaluated in 64-bit so the oracle itself is not the
limiting factor at 32-bit.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, precision

ScalarFn = Callable[..., Tensor]


def _element_indices(size: int, max_elements: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if max_elements is None or size <= max_elements:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_elements, replace=False))


def numerical_gradient(
    fn: ScalarFn,
    inputs: Sequence[np.ndarray],
    index: int,
    eps: float = 1e-6,
    elements: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central differences of `fn` w.r.t. `inputs[index]`; entries outside `elements` stay 0."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    positions = np.arange(flat.size) if elements is None else elements
    with precision(64), no_grad():
        for j in positions:
            orig = base[index].flat[j]
            base[index].flat[j] = orig + eps
            f_plus = fn(*(Tensor(x) for x in base)).item()
            base[index].flat[j] = orig - eps
            f_minus = fn(*(Tensor(x) for x in base)).item()
            base[index].flat[j] = orig
            flat[j] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor_ratio: float = 1e-2) -> float:
    """
    Max elementwise |a - n| / max(|a|, |n|, floor), where the floor is
    `floor_ratio` times the largest magnitude seen, so near-zero entries are
    judged on the gradient's own scale.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor_ratio * scale)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(
    fn: ScalarFn,
    inputs: Sequence[np.ndarray],
    bits: int = 64,
    eps: float = 1e-6,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Return the worst relative error between backward() and central differences over all inputs."""
    rng = np.random.default_rng(seed)
    with precision(bits):
        leaves = [Tensor(x, requires_grad=True) for x in inputs]
        grads = backward(fn(*leaves), leaves)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        picks = _element_indices(leaf.size, max_elements, rng)
        numeric = numerical_gradient(fn, inputs, i, eps=eps, elements=picks)
        analytic = grads[leaf].reshape(-1)[picks]
        worst = max(worst, relative_error(analytic, numeric.reshape(-1)[picks]))
    return worst

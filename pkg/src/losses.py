"""
Target-aware training objective:

    total = mse + lambda1 * grad + lambda2 * entropy + lambda3 * roi

mse      mean squared difference between fused and IR
grad     mean squared difference between the Sobel magnitude of fused and a
         target edge map (elementwise max of the IR and VIS_Y magnitudes, or
         the IR magnitude alone)
entropy  minus the soft-histogram Shannon entropy of fused, in bits
roi      mse restricted to the union of annotated boxes, 0 when there are none
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Literal, Tuple, TypeVar

import numpy as np

from .errors import ContractError, DimensionError
from .log import get_logger
from .parse.voc import AnnotationSet
from .tensor import Function, Tensor, conv2d, no_grad, pad_edge, sqrt

log = get_logger("losses")

SOBEL_EPS = 1e-8
ENTROPY_BINS = 64
PROB_FLOOR = 1e-12

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T

GradTarget = Literal["max", "ir"]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 0.2

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative, got {getattr(self, name)}")


T = TypeVar("T", Tensor, float)


def weighted_total(mse: T, grad: T, entropy: T, roi: T, weights: LossWeights) -> T:
    return mse + weights.lambda1 * grad + weights.lambda2 * entropy + weights.lambda3 * roi


@dataclass
class LossBreakdown:
    mse: Tensor
    grad: Tensor
    entropy: Tensor
    roi: Tensor
    total: Tensor

    def values(self) -> Dict[str, float]:
        return {k: getattr(self, k).item() for k in ("mse", "grad", "entropy", "roi", "total")}


def _check_same(*tensors: Tensor, what: str) -> None:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"{what}: shapes differ {[t.shape for t in tensors]}")


def loss_mse(fused: Tensor, ir: Tensor) -> Tensor:
    _check_same(fused, ir, what="loss_mse")
    d = fused - ir
    return (d * d).mean()


def _sobel_kernel(k: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(k[None, None], dtype=like.dtype)


def sobel_magnitude(img: Tensor) -> Tensor:
    """sqrt(Gx^2 + Gy^2 + eps^2) with 3x3 Sobel kernels; borders replicate the edge pixel."""
    if img.ndim != 3 or img.shape[0] != 1:
        raise DimensionError(f"sobel_magnitude expects [1, H, W], got {img.shape}")
    padded = pad_edge(img, 1)
    gx = conv2d(padded, _sobel_kernel(_SOBEL_X, img), padding=0)
    gy = conv2d(padded, _sobel_kernel(_SOBEL_Y, img), padding=0)
    return sqrt(gx * gx + gy * gy + SOBEL_EPS**2)


def grad_target(ir: Tensor, vis_y: Tensor, mode: GradTarget = "max") -> Tensor:
    with no_grad():
        if mode == "ir":
            return Tensor(sobel_magnitude(ir).data, dtype=ir.dtype)
        if mode == "max":
            return Tensor(np.maximum(sobel_magnitude(ir).data, sobel_magnitude(vis_y).data), dtype=ir.dtype)
    raise ContractError(f"unknown gradient target {mode!r}")


def loss_grad(fused: Tensor, ir: Tensor, vis_y: Tensor, target: GradTarget = "max") -> Tensor:
    _check_same(fused, ir, vis_y, what="loss_grad")
    d = sobel_magnitude(fused) - grad_target(ir, vis_y, target)
    return (d * d).mean()


class SoftEntropy(Function):
    """
    Negative Shannon entropy (bits) of a soft histogram.

    Bin centres are (b + 0.5) / bins. Each value is clamped to the outer
    centres and split between its two neighbouring bins with triangular
    weights, so every pixel contributes exactly one unit of mass.
    """

    name = "soft_entropy"

    def forward(self, x: np.ndarray, bins: int = ENTROPY_BINS) -> np.ndarray:
        v = x.reshape(-1).astype(np.float64)
        n = v.size
        lo_c, hi_c = 0.5 / bins, (bins - 0.5) / bins
        t = np.clip(v, lo_c, hi_c) * bins - 0.5
        lo = np.minimum(np.floor(t).astype(np.int64), bins - 2)
        frac = t - lo
        hist = np.bincount(lo, weights=1.0 - frac, minlength=bins) + np.bincount(lo + 1, weights=frac, minlength=bins)
        p = hist / n
        safe = np.maximum(p, PROB_FLOOR)
        h = float(-np.sum(p * np.log2(safe)))
        h_clipped = min(max(h, 0.0), math.log2(bins))

        # d(H)/d(v) for every pixel; zero where the clamp is active
        dfdp = np.log2(safe) + (p >= PROB_FLOOR) / math.log(2.0)
        inside = (v > lo_c) & (v < hi_c)
        self.dh_dv = (bins / n) * (dfdp[lo] - dfdp[lo + 1]) * inside
        self.clipped = h_clipped != h
        self.shape, self.dtype = x.shape, x.dtype
        return np.asarray(-h_clipped, dtype=x.dtype)

    def backward(self, grad: np.ndarray):
        if self.clipped:
            return (np.zeros(self.shape, dtype=self.dtype),)
        return ((-grad * self.dh_dv).reshape(self.shape).astype(self.dtype),)


def loss_entropy(fused: Tensor, bins: int = ENTROPY_BINS) -> Tensor:
    """-H_soft(fused); lies in [-log2(bins), 0], so minimizing it maximizes entropy."""
    if bins < 2:
        raise ContractError(f"entropy needs at least 2 bins, got {bins}")
    if fused.size == 0 or fused.data.min() < 0.0 or fused.data.max() > 1.0:
        raise ContractError("loss_entropy needs values in [0, 1]")
    return SoftEntropy.apply(fused, bins=bins)


def roi_mask(boxes: AnnotationSet, height: int, width: int) -> Tuple[np.ndarray, int]:
    """Union of box pixels as a boolean [H, W] mask, plus the count of boxes that clipped to nothing."""
    mask = np.zeros((height, width), dtype=bool)
    dropped = 0
    for box in boxes:
        c = box.clipped(height, width)
        if c is None:
            dropped += 1
            continue
        mask[c.ymin : c.ymax, c.xmin : c.xmax] = True
    if dropped:
        log.warning("%s: %d degenerate ROI box(es) ignored", boxes.image_id, dropped)
    return mask, dropped


def loss_roi(fused: Tensor, ir: Tensor, boxes: AnnotationSet) -> Tensor:
    _check_same(fused, ir, what="loss_roi")
    mask, _ = roi_mask(boxes, fused.shape[-2], fused.shape[-1])
    count = int(mask.sum())
    if count == 0:
        return Tensor(0.0, dtype=fused.dtype)
    d = fused - ir
    m = Tensor(np.broadcast_to(mask, fused.shape), dtype=fused.dtype)
    return (m * d * d).sum() * (1.0 / count)


def loss_total(
    fused: Tensor,
    ir: Tensor,
    vis_y: Tensor,
    boxes: AnnotationSet,
    weights: LossWeights = LossWeights(),
    target: GradTarget = "max",
    bins: int = ENTROPY_BINS,
) -> LossBreakdown:
    mse = loss_mse(fused, ir)
    grad = loss_grad(fused, ir, vis_y, target)
    entropy = loss_entropy(fused, bins)
    roi = loss_roi(fused, ir, boxes)
    return LossBreakdown(mse, grad, entropy, roi, weighted_total(mse, grad, entropy, roi, weights))

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, DimensionError, ImageFormatError
from .log import get_logger
from .tensor import Tensor

log = get_logger("images")

# BT.601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_MODES = ("L", "RGB")


@dataclass
class ImagePair:
    """A registered IR/VIS pair, normalized to [0, 1]."""

    id: str
    ir: Tensor  # [1, H, W]
    vis: Tensor  # [3, H, W]
    vis_y: Tensor  # [1, H, W]

    @classmethod
    def from_arrays(cls, pair_id: str, ir: np.ndarray, vis: np.ndarray) -> "ImagePair":
        ir_t, vis_t = Tensor(ir), Tensor(vis)
        if ir_t.ndim != 3 or ir_t.shape[0] != 1:
            raise DimensionError(f"{pair_id}: IR must be [1, H, W], got {ir_t.shape}")
        if vis_t.ndim != 3 or vis_t.shape[0] != 3:
            raise DimensionError(f"{pair_id}: VIS must be [3, H, W], got {vis_t.shape}")
        if ir_t.shape[1:] != vis_t.shape[1:]:
            raise DimensionError(
                f"{pair_id}: IR is {ir_t.shape[1]}x{ir_t.shape[2]} but VIS is {vis_t.shape[1]}x{vis_t.shape[2]}"
            )
        for label, t in (("IR", ir_t), ("VIS", vis_t)):
            if t.data.min() < 0.0 or t.data.max() > 1.0:
                raise ContractError(f"{pair_id}: {label} values must lie in [0, 1]")
        return cls(pair_id, ir_t, vis_t, rgb_to_luminance(vis_t))

    @property
    def size(self) -> Tuple[int, int]:
        return self.ir.shape[1], self.ir.shape[2]


def load_image(path: str) -> Tensor:
    """Read an 8-bit gray or RGB PNG as a [C, H, W] tensor with byte b mapped to b/255."""
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: expected PNG, got {im.format}")
            if im.mode not in _MODES:
                raise ImageFormatError(f"{path}: unsupported mode {im.mode!r} (need 8-bit L or RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError as e:
        raise ImageFormatError(f"{path}: no such file") from e
    except (UnidentifiedImageError, OSError) as e:
        if isinstance(e, ImageFormatError):
            raise
        raise ImageFormatError(f"{path}: unreadable image ({e})") from e
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return Tensor(arr.astype(np.float64) / 255.0)


def quantize(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to bytes with round(v * 255)."""
    return np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image: Tensor | np.ndarray, path: str) -> None:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DimensionError(f"{path}: can only save [1, H, W] or [3, H, W], got {arr.shape}")
    data = quantize(arr)
    im = Image.fromarray(data[0]) if data.shape[0] == 1 else Image.fromarray(np.ascontiguousarray(data.transpose(1, 2, 0)))
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    try:
        im.save(path, format="PNG")
    except OSError as e:
        raise ImageFormatError(f"{path}: cannot write PNG ({e})") from e


def rgb_to_luminance(vis: Tensor) -> Tensor:
    if vis.ndim != 3 or vis.shape[0] != 3:
        raise DimensionError(f"luminance needs [3, H, W], got {vis.shape}")
    r, g, b = vis.data.astype(np.float64)
    wr, wg, wb = LUMA_WEIGHTS
    y = wr * r + wg * g + wb * b
    return Tensor(np.clip(y, 0.0, 1.0)[None], dtype=vis.dtype)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def resize_bilinear(img: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ContractError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return Tensor(img.data.copy(), dtype=img.dtype)
    ry = _interp_matrix(out_h, h)
    rx = _interp_matrix(out_w, w)
    out = ry @ img.data.astype(np.float64) @ rx.T
    return Tensor(np.clip(out, 0.0, 1.0), dtype=img.dtype)


def as_gray(img: Tensor) -> Tensor:
    return img if img.shape[0] == 1 else rgb_to_luminance(img)


def as_rgb(img: Tensor) -> Tensor:
    if img.shape[0] == 3:
        return img
    return Tensor(np.repeat(img.data, 3, axis=0), dtype=img.dtype)


def load_pair(pair_id: str, ir_path: str, vis_path: str, size: Optional[Tuple[int, int]] = None) -> ImagePair:
    """
    Load and preprocess one pair: RGB IR files are reduced to luminance, gray VIS
    files are replicated to three planes, and both are resized to `size` (H, W)
    when given.
    """
    log.debug("loading pair %s (%s, %s)", pair_id, ir_path, vis_path)
    ir = as_gray(load_image(ir_path))
    vis = as_rgb(load_image(vis_path))
    if size is not None:
        ir = resize_bilinear(ir, *size)
        vis = resize_bilinear(vis, *size)
    if ir.shape[1:] != vis.shape[1:]:
        raise DimensionError(
            f"{pair_id}: IR {ir_path} is {ir.shape[1]}x{ir.shape[2]} but VIS {vis_path} is "
            f"{vis.shape[1]}x{vis.shape[2]} after preprocessing"
        )
    return ImagePair.from_arrays(pair_id, ir.data, vis.data)


def resize_pair(pair: ImagePair, size: Tuple[int, int]) -> ImagePair:
    h, w = size
    return ImagePair.from_arrays(pair.id, resize_bilinear(pair.ir, h, w).data, resize_bilinear(pair.vis, h, w).data)

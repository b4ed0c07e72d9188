from __future__ import annotations

import os
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from src.images import ImagePair
from src.tensor import Tensor


def make_pair(rng: np.random.Generator, h: int = 8, w: int = 8, pair_id: str = "p") -> ImagePair:
    return ImagePair.from_arrays(pair_id, rng.uniform(0.0, 1.0, (1, h, w)), rng.uniform(0.0, 1.0, (3, h, w)))


def weighted_sum(t: Tensor, seed: int = 99) -> Tensor:
    """sum(t * R) for a fixed random R, so every output element matters in a gradient check."""
    r = np.random.default_rng(seed).uniform(-1.0, 1.0, t.shape)
    return (t * Tensor(r, dtype=t.dtype)).sum()


def write_png(path: str, pixels: np.ndarray) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def make_dataset(root: str, ir_ids: Iterable[str], vis_ids: Optional[Iterable[str]] = None, size=(12, 12), seed=0) -> None:
    """Random 8-bit gray IR and RGB VIS files under root/ir and root/vis."""
    rng = np.random.default_rng(seed)
    h, w = size
    for pair_id in ir_ids:
        write_png(os.path.join(root, "ir", f"{pair_id}.png"), rng.integers(0, 256, (h, w)))
    for pair_id in vis_ids if vis_ids is not None else ir_ids:
        write_png(os.path.join(root, "vis", f"{pair_id}.png"), rng.integers(0, 256, (h, w, 3)))

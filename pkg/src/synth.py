"""
Deterministic synthetic IR/VIS pairs with ground-truth boxes.

Random numbers come from numpy's PCG64 (`np.random.default_rng(seed)`), drawn
in a fixed order: per target (radius, centre y, centre x, peak), then the VIS
phases and channel tints, then IR noise, then VIS noise.

IR   background 0.02 plus saturated Gaussian "hot" blobs
     min(peak, 2 * peak * exp(-d^2 / (2 sigma^2))) with sigma = radius / 2,
     plus Gaussian noise, clamped to [0, 1].
VIS  sinusoidal texture plus a horizontal ramp plus noise; no blob signal.
Box  one per blob: the pixels whose centres lie within +-radius (= 2 sigma).
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .dataset import ANN_DIR, IR_DIR, VIS_DIR, DatasetManifest, build_manifest
from .errors import DatasetError, SynthSpecError
from .images import ImagePair, save_image
from .log import get_logger
from .parse.voc import AnnotationSet, BoundingBox, render_annotations

log = get_logger("synth")

BACKGROUND = 0.02
HOT_GAIN = 2.0
PEAK_RANGE = (0.9, 1.0)
TARGET_LABEL = "target"


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 42
    height: int = 64
    width: int = 64
    n_targets: int = 3
    radius_range: Tuple[float, float] = (5.0, 9.0)  # half box side, pixels
    texture_freq: float = 0.15  # cycles per pixel
    noise: float = 0.02

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise SynthSpecError(f"image size must be positive, got {self.height}x{self.width}")
        if self.n_targets < 0:
            raise SynthSpecError(f"n_targets must be >= 0, got {self.n_targets}")
        lo, hi = self.radius_range
        if not 1.5 <= lo <= hi:
            raise SynthSpecError(f"radius range must satisfy 1.5 <= lo <= hi, got {self.radius_range}")
        if self.n_targets and 2 * hi > min(self.height, self.width) - 1:
            raise SynthSpecError(
                f"targets of radius up to {hi} cannot be placed in {self.height}x{self.width} "
                f"(radius must stay below {(min(self.height, self.width) - 1) / 2})"
            )
        if self.noise < 0 or self.texture_freq < 0:
            raise SynthSpecError("noise and texture_freq must be non-negative")


def _box(cy: float, cx: float, radius: float) -> BoundingBox:
    return BoundingBox(
        math.ceil(cx - radius),
        math.ceil(cy - radius),
        math.floor(cx + radius) + 1,
        math.floor(cy + radius) + 1,
        TARGET_LABEL,
    )


def gen_pair(spec: SynthSpec = SynthSpec(), pair_id: Optional[str] = None) -> Tuple[ImagePair, AnnotationSet]:
    spec.validate()
    h, w = spec.height, spec.width
    pair_id = pair_id if pair_id is not None else f"synth-{spec.seed}"
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    lo, hi = spec.radius_range
    hot = np.zeros((h, w))
    boxes: List[BoundingBox] = []
    for _ in range(spec.n_targets):
        radius = rng.uniform(lo, hi)
        cy = rng.uniform(radius, h - 1 - radius)
        cx = rng.uniform(radius, w - 1 - radius)
        peak = rng.uniform(*PEAK_RANGE)
        sigma = radius / 2.0
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        hot = np.maximum(hot, np.minimum(peak, HOT_GAIN * peak * g))
        boxes.append(_box(cy, cx, radius))

    phase_x, phase_y = rng.uniform(0.0, 2.0 * np.pi, size=2)
    tint = rng.uniform(0.8, 1.0, size=3)
    ramp = xx / (w - 1) if w > 1 else np.zeros_like(xx)
    f = 2.0 * np.pi * spec.texture_freq
    base = 0.35 + 0.2 * np.sin(f * xx + phase_x) * np.cos(f * yy + phase_y) + 0.25 * ramp

    ir = np.clip(BACKGROUND + hot + rng.normal(0.0, spec.noise, size=(h, w)), 0.0, 1.0)
    vis = np.clip(base[None] * tint[:, None, None] + rng.normal(0.0, spec.noise, size=(3, h, w)), 0.0, 1.0)

    pair = ImagePair.from_arrays(pair_id, ir[None], vis)
    return pair, AnnotationSet(pair_id, boxes, 0, (h, w))


def write_dataset(spec: SynthSpec, root: str, count: int) -> DatasetManifest:
    """
    Write `count` pairs under root/{ir,vis,ann}; pair i uses seed spec.seed + i
    and id f"{i:05d}". Returns build_manifest(root).
    """
    if count < 0:
        raise SynthSpecError(f"count must be >= 0, got {count}")
    spec.validate()
    try:
        for sub in (IR_DIR, VIS_DIR, ANN_DIR):
            os.makedirs(os.path.join(root, sub), exist_ok=True)
    except OSError as e:
        raise DatasetError(f"{root}: cannot create dataset directories ({e.strerror or e})") from e

    for i in range(count):
        pair_id = f"{i:05d}"
        pair, ann = gen_pair(replace(spec, seed=spec.seed + i), pair_id)
        save_image(pair.ir, os.path.join(root, IR_DIR, f"{pair_id}.png"))
        save_image(pair.vis, os.path.join(root, VIS_DIR, f"{pair_id}.png"))
        ann_path = os.path.join(root, ANN_DIR, f"{pair_id}.xml")
        try:
            with open(ann_path, "wb") as f:
                f.write(render_annotations(ann, pair.size))
        except OSError as e:
            raise DatasetError(f"{ann_path}: cannot write annotations ({e.strerror or e})") from e
        log.debug("wrote synthetic pair %s with %d target(s)", pair_id, len(ann))
    log.info("Synthesized %d pair(s) of %dx%d under %s", count, spec.height, spec.width, root)
    return build_manifest(root)

"""
Evaluation metrics, all computed in 64-bit outside any gradient graph.

SSIM is the canonical single-scale definition: 11x11 Gaussian window with
sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 for data range 1, averaged over the window
positions that lie fully inside the image.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from skimage.metrics import structural_similarity

from .errors import ContractError, DimensionError
from .log import get_logger
from .parse.voc import AnnotationSet
from .tensor import Tensor

log = get_logger("metrics")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
ENTROPY_LEVELS = 256
REPORT_COLUMNS = ["id", "ssim", "mse", "entropy", "roi_ssim"]


def _plane(x: Tensor | np.ndarray, what: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise DimensionError(f"{what}: expected a single plane, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise DimensionError(f"{what}: expected [1, H, W] or [H, W], got {arr.shape}")
    return arr.astype(np.float64)


def _pair(x, y, what: str):
    a, b = _plane(x, what), _plane(y, what)
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes differ {a.shape} vs {b.shape}")
    return a, b


def ssim(x: Tensor | np.ndarray, y: Tensor | np.ndarray) -> float:
    a, b = _pair(x, y, "ssim")
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(
            f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape[0]}x{a.shape[1]}; "
            "use roi_ssim, which skips regions smaller than the window"
        )
    return float(
        structural_similarity(
            a,
            b,
            win_size=SSIM_WINDOW,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=1.0,
        )
    )


def mse_metric(x: Tensor | np.ndarray, y: Tensor | np.ndarray) -> float:
    a, b = _pair(x, y, "mse_metric")
    d = a - b
    return float(np.mean(d * d))


def entropy_metric(x: Tensor | np.ndarray) -> float:
    """Shannon entropy in bits of the 256-level histogram floor(min(x, 1 - 1e-9) * 256)."""
    a = _plane(x, "entropy_metric")
    if a.size == 0:
        raise ContractError("entropy of an empty image")
    levels = np.floor(np.clip(a, 0.0, 1.0 - 1e-9) * ENTROPY_LEVELS).astype(np.int64)
    counts = np.bincount(levels.reshape(-1), minlength=ENTROPY_LEVELS)
    p = counts[counts > 0] / a.size
    return float(max(0.0, -np.sum(p * np.log2(p))))


@dataclass
class RoiSsim:
    value: Optional[float]  # None when no box is large enough
    used: int = 0
    skipped: int = 0


def roi_ssim(fused: Tensor | np.ndarray, ir: Tensor | np.ndarray, boxes: AnnotationSet) -> RoiSsim:
    """Mean SSIM over per-box crops; boxes with a side below the window size are skipped."""
    a, b = _pair(fused, ir, "roi_ssim")
    h, w = a.shape
    scores: List[float] = []
    skipped = 0
    for box in boxes:
        c = box.clipped(h, w)
        if c is None or c.width < SSIM_WINDOW or c.height < SSIM_WINDOW:
            skipped += 1
            continue
        scores.append(ssim(a[c.ymin : c.ymax, c.xmin : c.xmax], b[c.ymin : c.ymax, c.xmin : c.xmax]))
    if skipped:
        log.debug("%s: %d box(es) smaller than %dx%d skipped for ROI-SSIM", boxes.image_id, skipped, SSIM_WINDOW, SSIM_WINDOW)
    if not scores:
        return RoiSsim(None, 0, skipped)
    return RoiSsim(float(np.mean(scores)), len(scores), skipped)


@dataclass
class MetricRow:
    id: str
    ssim: float
    mse: float
    entropy: float
    roi_ssim: Optional[float] = None
    roi_skipped: int = 0


@dataclass
class MetricReport:
    rows: List[MetricRow] = field(default_factory=list)

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def frame(self) -> pd.DataFrame:
        """Per-image table with the report columns; a missing ROI-SSIM is NaN."""
        df = pd.DataFrame([asdict(r) for r in self.rows], columns=REPORT_COLUMNS + ["roi_skipped"])
        df["roi_ssim"] = pd.to_numeric(df["roi_ssim"], errors="coerce")
        return df

    def means(self) -> Dict[str, Optional[float]]:
        """Column means; ROI-SSIM averages only the images that had a qualifying box."""
        df = self.frame()
        out: Dict[str, Optional[float]] = {}
        for col in REPORT_COLUMNS[1:]:
            m = df[col].mean() if len(df) else float("nan")
            out[col] = None if pd.isna(m) else float(m)
        return out

    def write_csv(self, path: str) -> None:
        records = [{c: getattr(r, c) for c in REPORT_COLUMNS} for r in self.rows]
        records.append({"id": "mean", **self.means()})
        table = pd.DataFrame(records, columns=REPORT_COLUMNS)
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        table.to_csv(path, index=False, na_rep="", lineterminator="\n")
        log.info("Wrote %d metric row(s) plus mean to %s", len(self.rows), path)

    def mean_line(self) -> str:
        m = self.means()
        return ",".join(["mean"] + ["" if m[c] is None else repr(m[c]) for c in REPORT_COLUMNS[1:]])

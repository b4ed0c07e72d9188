from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import config as env
from .checkpoint import Checkpoint, save_checkpoint
from .dataset import DatasetManifest, load_sample
from .errors import DatasetError, NonFiniteError, TrainingDivergedError
from .images import ImagePair
from .log import get_logger
from .losses import LossBreakdown, loss_total
from .metrics import MetricReport, MetricRow, entropy_metric, mse_metric, roi_ssim, ssim
from .model import FusionNetParams, forward, init_params
from .parse.voc import AnnotationSet
from .run_config import TrainConfig, dump_config, save_config
from .tensor import AdamState, Tensor, adam_step, backward, default_dtype, no_grad, precision

log = get_logger("trainer")

LOSS_LOG = "loss_log.csv"
LOSS_COLUMNS = ["step", "epoch", "id", "mse", "grad", "entropy", "roi", "total"]
FINAL_CHECKPOINT = "final.fnck"


@dataclass
class StepRecord:
    step: int
    epoch: int
    id: str
    mse: float
    grad: float
    entropy: float
    roi: float
    total: float

    @classmethod
    def from_breakdown(cls, step: int, epoch: int, pair_id: str, losses: LossBreakdown) -> "StepRecord":
        return cls(step, epoch, pair_id, **losses.values())

    @classmethod
    def diverged(cls, step: int, epoch: int, pair_id: str, values: Optional[Dict[str, float]]) -> "StepRecord":
        """Row for a step that never finished; unknown losses are NaN."""
        return cls(step, epoch, pair_id, **(values or dict.fromkeys(LOSS_COLUMNS[3:], float("nan"))))

    def row(self) -> List[str]:
        return [str(self.step), str(self.epoch), self.id] + [
            repr(getattr(self, k)) for k in ("mse", "grad", "entropy", "roi", "total")
        ]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: List[StepRecord] = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    log_path: Optional[str] = None

    @property
    def last(self) -> Optional[StepRecord]:
        return self.records[-1] if self.records else None


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Visiting order for one epoch; depends only on (seed, epoch, n)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _bits() -> int:
    return np.dtype(default_dtype()).itemsize * 8


def _load(manifest: DatasetManifest, pair_id: str, size: Optional[Tuple[int, int]], bits: int) -> Tuple[ImagePair, AnnotationSet]:
    # precision is thread-local, so a prefetch worker has to set it again
    with precision(bits):
        return load_sample(manifest, pair_id, size)


def iter_samples(
    manifest: DatasetManifest,
    ids: Sequence[str],
    size: Optional[Tuple[int, int]],
    prefetch: bool = env.PREFETCH,
) -> Iterator[Tuple[ImagePair, AnnotationSet]]:
    """Yield samples in order; with `prefetch`, one worker loads the next pair while the caller works."""
    bits = _bits()
    if not prefetch or len(ids) < 2:
        for pair_id in ids:
            yield _load(manifest, pair_id, size, bits)
        return
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="prefetch") as pool:
        pending = pool.submit(_load, manifest, ids[0], size, bits)
        for k in range(len(ids)):
            current = pending.result()
            if k + 1 < len(ids):
                pending = pool.submit(_load, manifest, ids[k + 1], size, bits)
            yield current


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most `max_norm`; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = (grads[name] * scale).astype(grads[name].dtype, copy=False)
    return norm


def train_step(
    pair: ImagePair,
    boxes: AnnotationSet,
    params: FusionNetParams,
    adam: AdamState,
    config: TrainConfig,
    step: int,
) -> LossBreakdown:
    """forward -> loss_total -> backward -> one Adam update of every parameter."""
    named = params.named_parameters()
    try:
        art = forward(pair, params)
        losses = loss_total(
            art.fused, pair.ir, pair.vis_y, boxes, config.weights, config.grad_target, config.entropy_bins
        )
        grads = backward(losses.total, list(named.values()))
    except NonFiniteError as e:
        raise TrainingDivergedError(step, str(e)) from e
    g = {name: grads[t] for name, t in named.items()}
    if config.clip_grad_norm > 0:
        clip_gradients(g, config.clip_grad_norm)
    try:
        adam_step(named, g, adam, config.lr)
    except NonFiniteError as e:
        raise TrainingDivergedError(step, str(e), losses.values()) from e
    return losses


def _fresh_checkpoint(config: TrainConfig) -> Checkpoint:
    params = init_params(config.seed, config.init_scheme, config.channels)
    adam = AdamState(beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon)
    return Checkpoint(config, params, adam)


def _open_log(path: str, append: bool):
    exists = os.path.isfile(path)
    f = open(path, "a" if append and exists else "w", encoding="utf-8", newline="")
    writer = csv.writer(f, lineterminator="\n")
    if not (append and exists):
        writer.writerow(LOSS_COLUMNS)
    return f, writer


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    resume: Optional[Checkpoint] = None,
    max_steps: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> TrainResult:
    """
    Run (or continue) training and return the final checkpoint plus the loss
    records of the steps taken in this call.

    Each epoch visits every pair once in the order `epoch_order(seed, epoch)`;
    `max_steps` caps the global step count. Checkpoints go to `out_dir`
    (default `config.out_dir`) every `checkpoint_every` steps and at the end.
    """
    if len(manifest) == 0:
        raise DatasetError(f"{manifest.root}: manifest is empty, nothing to train on")
    out = out_dir or config.out_dir
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"{out}: cannot create output directory ({e.strerror or e})") from e

    if resume is not None:
        ckpt = resume
        if dump_config(resume.config, include_paths=False) != dump_config(config, include_paths=False):
            log.warning("Resuming with a config that differs from the checkpoint's; the new values apply")
        ckpt.config = config
        ckpt.adam.beta1, ckpt.adam.beta2, ckpt.adam.epsilon = config.beta1, config.beta2, config.epsilon
        log.info("Resuming at epoch %d, step %d, cursor %d", ckpt.epoch, ckpt.step, ckpt.cursor)
    else:
        ckpt = _fresh_checkpoint(config)
    save_config(config, os.path.join(out, "config.env"))

    n = len(manifest)
    if ckpt.cursor > n:
        raise DatasetError(f"{manifest.root}: checkpoint cursor {ckpt.cursor} lies beyond the {n} pair(s) of this manifest")
    limit = config.epochs * n if max_steps is None else min(config.epochs * n, max_steps)
    log.info(
        "Training %d parameter(s) on %d pair(s) at %dx%d for up to %d step(s)",
        ckpt.params.parameter_count(), n, config.height, config.width, limit,
    )

    log_path = os.path.join(out, LOSS_LOG)
    records: List[StepRecord] = []
    f, writer = _open_log(log_path, append=resume is not None)
    try:
        while ckpt.epoch < config.epochs and ckpt.step < limit:
            order = epoch_order(config.seed, ckpt.epoch, n)
            remaining = [manifest.ids[k] for k in order[ckpt.cursor :]][: limit - ckpt.step]
            for pair, boxes in iter_samples(manifest, remaining, config.size):
                step = ckpt.step + 1
                try:
                    losses = train_step(pair, boxes, ckpt.params, ckpt.adam, config, step)
                except TrainingDivergedError as e:
                    writer.writerow(StepRecord.diverged(step, ckpt.epoch, pair.id, e.losses).row())
                    raise
                rec = StepRecord.from_breakdown(step, ckpt.epoch, pair.id, losses)
                ckpt.step, ckpt.cursor = step, ckpt.cursor + 1
                records.append(rec)
                writer.writerow(rec.row())
                log.info("[%d/%d] %s loss=%.6f", step, limit, pair.id, rec.total)
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    f.flush()
                    save_checkpoint(ckpt, os.path.join(out, f"step_{step:06d}.fnck"))
            if ckpt.cursor == n:
                ckpt.epoch, ckpt.cursor = ckpt.epoch + 1, 0
    finally:
        f.close()

    final_path = os.path.join(out, FINAL_CHECKPOINT)
    save_checkpoint(ckpt, final_path)
    return TrainResult(ckpt, records, final_path, log_path)


def read_loss_log(path: str) -> List[StepRecord]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        StepRecord(
            int(r["step"]), int(r["epoch"]), r["id"],
            *(float(r[k]) for k in ("mse", "grad", "entropy", "roi", "total")),
        )
        for r in rows
    ]


def fuse_pair(ckpt: Checkpoint, pair: ImagePair, alpha_override: Optional[float] = None) -> Tuple[Tensor, Tensor]:
    """(fused, alpha) for one pair, without recording a graph."""
    with no_grad():
        art = forward(pair, ckpt.params, alpha_override=alpha_override)
    return art.fused, art.alpha


def evaluate(
    ckpt: Checkpoint,
    manifest: DatasetManifest,
    alpha_override: Optional[float] = None,
    size: Optional[Tuple[int, int]] = None,
) -> MetricReport:
    """Per-pair SSIM, MSE and ROI-SSIM of fused against IR, and fused entropy; pairs keep their size unless `size` is set."""
    if len(manifest) == 0:
        raise DatasetError(f"{manifest.root}: manifest is empty, nothing to evaluate")
    report = MetricReport()
    for pair, boxes in iter_samples(manifest, manifest.ids, size):
        fused, _ = fuse_pair(ckpt, pair, alpha_override)
        roi = roi_ssim(fused, pair.ir, boxes)
        row = MetricRow(
            pair.id,
            ssim(fused, pair.ir),
            mse_metric(fused, pair.ir),
            entropy_metric(fused),
            roi.value,
            roi.skipped,
        )
        report.add(row)
        log.info("%s ssim=%.4f mse=%.6f entropy=%.4f roi_ssim=%s", row.id, row.ssim, row.mse, row.entropy,
                 "n/a" if row.roi_ssim is None else f"{row.roi_ssim:.4f}")
    return report

"""Soft-IoU training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from irformer.core import ops
from irformer.core.optim import SGD
from irformer.core.tensor import Tensor, as_tensor
from irformer.errors import ConfigError, ContractError, DimensionError, NumericalError
from irformer.model import Detector

log = logging.getLogger(__name__)

IOU_EPS = 1e-8
LOG_HEADER = "# irformer training log v1"


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    max_steps: int = 0          # 0 = no cap beyond epochs
    seed: int = 0
    checkpoint_every: int = 0   # steps; 0 disables intermediate checkpoints

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr, momentum and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("max_steps and checkpoint_every must be >= 0")


def iou_loss(y, gt) -> Tensor:
    """
    Soft IoU loss ``1 - sum(y*g) / sum(y + g - y*g)`` over the trailing two
    axes, averaged over any leading (batch) axes.

    ``gt`` is treated as a constant.  A map whose union is (numerically)
    empty, i.e. all-zero ``y`` and ``gt``, gives loss 0.
    """
    y = as_tensor(y)
    g = Tensor(gt.data if isinstance(gt, Tensor) else gt)
    if y.shape != g.shape:
        raise DimensionError(f"iou_loss: prediction {y.shape} vs mask {g.shape}")
    if y.ndim < 2:
        raise DimensionError("iou_loss expects at least 2-D maps")
    axes = (-2, -1)
    yg = y * g
    inter = ops.sum(yg, axis=axes)
    union = ops.sum(y + g - yg, axis=axes)
    # guard only the degenerate empty-union case so I == U gives exactly 0
    # and I == 0 gives exactly 1
    empty = (union.data <= IOU_EPS).astype(np.float64)
    per_image = 1.0 - (inter + empty) / (union + empty)
    return ops.mean(per_image)


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    seconds: float


def train(model: Detector, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig,
          out_dir: Optional[Path] = None, log_every: int = 50) -> list[StepRecord]:
    """
    Train ``model`` in place with SGD + momentum on the soft-IoU loss.

    Parameters
    ----------
    images, masks : ndarray
        (N, H, W) arrays; images in [0, 1], masks binary.
    out_dir : Path, optional
        Receives ``train_log.csv``, periodic ``ckpt_step{N}.bin`` files and
        ``final.bin``.

    Returns
    -------
    list of StepRecord
        One per optimisation step.
    """
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if len(images) == 0:
        raise ContractError("cannot train on an empty dataset")
    if images.shape != masks.shape:
        raise DimensionError(f"images {images.shape} vs masks {masks.shape}")

    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    records: list[StepRecord] = []
    t0 = time.perf_counter()
    step = 0
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred = _squeeze(model(images[idx]))
            loss = iou_loss(pred, masks[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"loss became {value} at step {step}")
            loss.backward()
            opt.step()
            opt.zero_grad()
            step += 1
            records.append(StepRecord(step, epoch, value, time.perf_counter() - t0))
            if log_every and step % log_every == 0:
                log.info("step %d epoch %d loss %.4f", step, epoch, value)
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                model.save(out_dir / f"ckpt_step{step}.bin", {"step": step})
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        if done:
            break

    if out_dir is not None:
        write_log(records, out_dir / "train_log.csv")
        model.save(out_dir / "final.bin", {"step": step, "train_config": asdict(cfg)})
    return records


def _squeeze(y: Tensor) -> Tensor:
    B, _, H, W = y.shape
    return y.reshape(B, H, W)


def write_log(records: Sequence[StepRecord], path: Path) -> None:
    # wall-clock time stays out of the file so reruns are byte-identical
    with open(path, "w", newline="") as fh:
        fh.write(LOG_HEADER + "\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "loss"])
        for r in records:
            writer.writerow([r.step, r.epoch, repr(r.loss)])

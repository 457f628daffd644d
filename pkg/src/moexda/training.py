"""Weighted two-stream cross-entropy and a deterministic training loop."""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .edges import frames_to_unit
from .vit import TwoStreamViT, save_checkpoint

__all__ = [
    "LossWeights",
    "TrainConfig",
    "TrainingDiverged",
    "stream_losses",
    "total_loss",
    "seed_everything",
    "train",
]

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    alpha_rgb: float = 0.5
    alpha_edge: float = 1.0

    def __post_init__(self):
        if self.alpha_rgb < 0 or self.alpha_edge < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha_rgb == 0 and self.alpha_edge == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    frames_per_clip: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_path: str = "runs/model.npz"
    metrics_path: str = "runs/metrics.jsonl"

    def __post_init__(self):
        if self.batch_size < 1 or self.frames_per_clip < 1:
            raise ValueError("batch_size and frames_per_clip must be >= 1")
        if self.epochs < 0 or self.lr < 0 or self.weight_decay < 0:
            raise ValueError("epochs, lr and weight_decay must be non-negative")


class TrainingDiverged(RuntimeError):
    pass


def stream_losses(
    logits_rgb: torch.Tensor, logits_edge: torch.Tensor, labels: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch-mean cross-entropy of each stream."""
    k = logits_rgb.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    return F.cross_entropy(logits_rgb, labels), F.cross_entropy(logits_edge, labels)


def total_loss(
    logits_rgb: torch.Tensor,
    logits_edge: torch.Tensor,
    labels: torch.Tensor,
    w: Optional[LossWeights] = None,
) -> torch.Tensor:
    w = w or LossWeights()
    loss_rgb, loss_edge = stream_losses(logits_rgb, logits_edge, labels)
    return w.alpha_edge * loss_edge + w.alpha_rgb * loss_rgb


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _append_record(path: Optional[Path], record: dict) -> None:
    if path is not None:
        with path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def train(
    model: TwoStreamViT,
    dataset: tuple[torch.Tensor, torch.Tensor],
    cfg: TrainConfig,
    w: Optional[LossWeights] = None,
    config_record: Optional[dict] = None,
) -> list[dict]:
    """Mini-batch AdamW over ``dataset = (uint8 clips [V, T, 3, H, W], labels)``.

    Appends one JSON record per epoch to ``cfg.metrics_path`` (truncated at
    start) and writes the final parameters to ``cfg.checkpoint_path``. Either
    path may be empty to skip it. Returns the epoch records.
    """
    w = w or LossWeights()
    clips, labels = dataset
    metrics_path = Path(cfg.metrics_path) if cfg.metrics_path else None
    if metrics_path is not None:
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        metrics_path.write_text("")

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(labels)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        sums = {"loss_total": 0.0, "loss_rgb": 0.0, "loss_edge": 0.0}
        correct_rgb = correct_edge = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            clip = frames_to_unit(clips[idx])
            y = labels[idx]
            out_rgb, out_edge = model(clip)
            loss_rgb, loss_edge = stream_losses(out_rgb.logits, out_edge.logits, y)
            loss = w.alpha_edge * loss_edge + w.alpha_rgb * loss_rgb
            if not torch.isfinite(loss):
                record = {
                    "epoch": epoch, "step": step, "error": "non-finite loss",
                    "loss_total": loss.item(), "loss_rgb": loss_rgb.item(),
                    "loss_edge": loss_edge.item(),
                }
                _append_record(metrics_path, record)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            b = len(idx)
            sums["loss_total"] += loss.item() * b
            sums["loss_rgb"] += loss_rgb.item() * b
            sums["loss_edge"] += loss_edge.item() * b
            correct_rgb += int((out_rgb.logits.argmax(-1) == y).sum())
            correct_edge += int((out_edge.logits.argmax(-1) == y).sum())

        record = {"epoch": epoch, **{k: v / n for k, v in sums.items()},
                  "acc_rgb": correct_rgb / n, "acc_edge": correct_edge / n}
        _append_record(metrics_path, record)
        history.append(record)
        log.info(
            "epoch %d loss %.4f acc_rgb %.3f acc_edge %.3f",
            epoch, record["loss_total"], record["acc_rgb"], record["acc_edge"],
        )

    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, model, config_record or {})
    return history


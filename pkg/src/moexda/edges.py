"""Online edge extraction and stream-specific input normalization.

Frames enter as float tensors in [0, 1]. The edge stream sees the Sobel
gradient magnitude of the BT.601 luma, clipped to [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

__all__ = [
    "NormalizationStats",
    "RunningPixelStats",
    "RGB_STATS",
    "EDGE_STATS",
    "to_grayscale",
    "sobel_edges",
    "make_edge_clip",
    "compute_corpus_stats",
    "normalize_input",
    "write_stats",
    "read_stats",
    "frames_to_unit",
]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != len(self.std) or not self.mean:
            raise ValueError(f"mean/std length mismatch: {len(self.mean)} vs {len(self.std)}")

    @property
    def channels(self) -> int:
        return len(self.mean)


# ImageNet statistics, the usual choice for RGB video models.
RGB_STATS = NormalizationStats((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
# Sobel-magnitude statistics of grayscale Kinetics "abseiling" frames.
EDGE_STATS = NormalizationStats((0.026,), (0.037,))


def to_grayscale(frames: torch.Tensor) -> torch.Tensor:
    """Collapse the channel axis (dim -3, ordered R, G, B) to BT.601 luma."""
    if frames.dim() < 3 or frames.shape[-3] != 3:
        raise ValueError(f"expected 3 channels at dim -3, got shape {tuple(frames.shape)}")
    r, g, b = frames.unbind(dim=-3)
    wr, wg, wb = LUMA_WEIGHTS
    return wr * r + wg * g + wb * b


def sobel_edges(gray: torch.Tensor) -> torch.Tensor:
    """Sobel gradient magnitude with replicate padding, clipped to [0, 1].

    Accepts ``[H, W]`` or any leading batch axes ``[..., H, W]``. Uses the
    separable form (central difference, then [1, 2, 1] smoothing), which
    is exactly zero on flat regions.
    """
    if gray.dim() < 2:
        raise ValueError(f"expected at least 2 dims, got shape {tuple(gray.shape)}")
    h, w = gray.shape[-2:]
    if h < 3 or w < 3:
        raise ValueError(f"image must be at least 3x3, got {h}x{w}")
    lead = gray.shape[:-2]
    x = F.pad(gray.reshape(-1, 1, h, w), (1, 1, 1, 1), mode="replicate")[:, 0]
    dx = x[:, :, 2:] - x[:, :, :-2]  # [n, H+2, W]
    dy = x[:, 2:, :] - x[:, :-2, :]  # [n, H, W+2]
    gx = dx[:, :-2] + 2 * dx[:, 1:-1] + dx[:, 2:]
    gy = dy[:, :, :-2] + 2 * dy[:, :, 1:-1] + dy[:, :, 2:]
    mag = torch.sqrt(gx * gx + gy * gy)
    return mag.clamp(max=1.0).reshape(*lead, h, w)


def make_edge_clip(clip: torch.Tensor) -> torch.Tensor:
    """``[B, T, 3, H, W]`` RGB clip -> ``[B, T, H, W]`` edge clip."""
    if clip.dim() != 5:
        raise ValueError(f"expected [B, T, 3, H, W], got shape {tuple(clip.shape)}")
    return sobel_edges(to_grayscale(clip))


class RunningPixelStats:
    """Streaming (count, sum, sum of squares) accumulator in float64.

    Accumulators from independent workers combine with ``+``.
    """

    def __init__(self, count: int = 0, total: float = 0.0, total_sq: float = 0.0):
        self.count = count
        self.total = total
        self.total_sq = total_sq

    def update(self, values: torch.Tensor) -> None:
        v = values.detach().to(torch.float64)
        self.count += v.numel()
        self.total += float(v.sum())
        self.total_sq += float((v * v).sum())

    def __add__(self, other: RunningPixelStats) -> RunningPixelStats:
        return RunningPixelStats(
            self.count + other.count,
            self.total + other.total,
            self.total_sq + other.total_sq,
        )

    @property
    def mean(self) -> float:
        if self.count == 0:
            raise ValueError("no pixels accumulated")
        return self.total / self.count

    @property
    def std(self) -> float:
        m = self.mean
        var = self.total_sq / self.count - m * m
        # Rounding can push a zero variance slightly negative.
        return math.sqrt(max(var, 0.0))


def compute_corpus_stats(
    corpus: Iterable[torch.Tensor], return_accumulator: bool = False
) -> NormalizationStats | tuple[NormalizationStats, RunningPixelStats]:
    """Population mean/std over every edge pixel of every clip in ``corpus``.

    Each clip is ``[B, T, 3, H, W]`` in [0, 1]. A zero std is returned as-is;
    ``normalize_input`` refuses such stats.
    """
    acc = RunningPixelStats()
    for clip in corpus:
        acc.update(make_edge_clip(clip))
    if acc.count == 0:
        raise ValueError("empty corpus")
    stats = NormalizationStats((acc.mean,), (acc.std,))
    if return_accumulator:
        return stats, acc
    return stats


def normalize_input(frames: torch.Tensor, stats: NormalizationStats) -> torch.Tensor:
    """Per-channel ``(x - mean) / std``.

    Single-channel stats broadcast over the whole tensor (edge clips have no
    channel axis); multi-channel stats apply along dim -3.
    """
    if any(s <= 0 for s in stats.std):
        raise ValueError(f"std entries must be positive, got {stats.std}")
    mean = torch.tensor(stats.mean, dtype=frames.dtype, device=frames.device)
    std = torch.tensor(stats.std, dtype=frames.dtype, device=frames.device)
    if stats.channels == 1:
        return (frames - mean[0]) / std[0]
    if frames.dim() < 3 or frames.shape[-3] != stats.channels:
        raise ValueError(
            f"stats have {stats.channels} channels but frames have shape {tuple(frames.shape)}"
        )
    return (frames - mean[:, None, None]) / std[:, None, None]


def write_stats(path: str | Path, acc: RunningPixelStats) -> dict:
    record = {"mean": [acc.mean], "std": [acc.std], "num_pixels": acc.count}
    Path(path).write_text(json.dumps(record, indent=2) + "\n")
    return record


def read_stats(path: str | Path) -> NormalizationStats:
    record = json.loads(Path(path).read_text())
    return NormalizationStats(record["mean"], record["std"])


def frames_to_unit(frames_u8: Sequence | torch.Tensor) -> torch.Tensor:
    """8-bit frames -> float32 in [0, 1]."""
    t = torch.as_tensor(frames_u8)
    if t.dtype != torch.uint8:
        raise TypeError(f"expected uint8 frames, got {t.dtype}")
    return t.to(torch.float32) / 255.0

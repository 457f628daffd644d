"""Top-1, background-only (BOR) and actor-only (HOR) accuracy per stream.

BOR is the accuracy on ``bg_only`` variants (actor removed) and HOR the
accuracy on ``actor_only`` variants (background replaced by mid-gray). A
model leaning on scene appearance scores a high BOR; one reading the actor
scores a high HOR.

Any callable mapping a float clip ``[B, T, 3, H, W]`` to a dict of
``stream -> logits [B, K]`` can be evaluated, which covers the two-stream
model as well as the scripted reference readers below.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .data import VARIANTS, load_split
from .edges import frames_to_unit

__all__ = [
    "METRIC_VERSION",
    "StreamMetrics",
    "MetricsReport",
    "evaluate",
    "predict_split",
    "top1_accuracy",
    "report_from_log",
    "compare_runs",
    "vit_predictor",
    "MotionReader",
    "BackgroundReader",
    "ConstantClassifier",
]

Predictor = Callable[[torch.Tensor], Mapping[str, torch.Tensor]]

METRIC_VERSION = "variant-accuracy-v1"
LOG_HEADER = ("video", "label", "pred_full", "pred_bg", "pred_actor", "stream")
COMPARE_HEADER = ("norm", "direction", "stop_gradient", "layers", "stream", "top1", "bor", "hor")


@dataclass
class StreamMetrics:
    num_videos: int
    correct_full: int
    correct_bg: int
    correct_actor: int

    def __post_init__(self):
        for c in (self.correct_full, self.correct_bg, self.correct_actor):
            if not 0 <= c <= self.num_videos:
                raise ValueError("correct counts must lie in [0, num_videos]")

    def _ratio(self, correct: int) -> float:
        return float(Fraction(correct, self.num_videos)) if self.num_videos else 0.0

    @property
    def top1(self) -> float:
        return self._ratio(self.correct_full)

    @property
    def bor(self) -> float:
        return self._ratio(self.correct_bg)

    @property
    def hor(self) -> float:
        return self._ratio(self.correct_actor)

    def to_dict(self) -> dict:
        return {
            "num_videos": self.num_videos,
            "correct_full": self.correct_full,
            "correct_bg": self.correct_bg,
            "correct_actor": self.correct_actor,
            "top1": self.top1,
            "bor": self.bor,
            "hor": self.hor,
        }


@dataclass
class MetricsReport:
    streams: dict[str, StreamMetrics]
    fingerprint: dict = field(default_factory=dict)
    version: str = METRIC_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "fingerprint": self.fingerprint,
            "streams": {k: v.to_dict() for k, v in self.streams.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        streams = {
            k: StreamMetrics(v["num_videos"], v["correct_full"], v["correct_bg"], v["correct_actor"])
            for k, v in d["streams"].items()
        }
        return cls(streams, d.get("fingerprint", {}), d.get("version", METRIC_VERSION))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> MetricsReport:
        return cls.from_dict(json.loads(Path(path).read_text()))


def vit_predictor(model: torch.nn.Module) -> Predictor:
    model.eval()
    return model.predict_logits


@torch.no_grad()
def predict_split(
    predict: Predictor, clips_u8: torch.Tensor, batch_size: int
) -> dict[str, np.ndarray]:
    preds: dict[str, list[np.ndarray]] = {}
    for start in range(0, len(clips_u8), batch_size):
        out = predict(frames_to_unit(clips_u8[start:start + batch_size]))
        for stream, logits in out.items():
            preds.setdefault(stream, []).append(logits.argmax(dim=-1).cpu().numpy())
    return {k: np.concatenate(v) for k, v in preds.items()}


def top1_accuracy(
    predict: Predictor, root: str | Path, clip_len: int = 16, batch_size: int = 16
) -> dict[str, float]:
    """Per-stream accuracy on the original clips only."""
    clips, labels, _ = load_split(root, clip_len)
    preds = predict_split(predict, clips, batch_size)
    return {k: float(Fraction(int((v == labels.numpy()).sum()), len(labels))) for k, v in preds.items()}


def _aggregate(rows: Sequence[dict]) -> dict[str, StreamMetrics]:
    streams: dict[str, list[int]] = {}
    for r in rows:
        c = streams.setdefault(r["stream"], [0, 0, 0, 0])
        c[0] += 1
        c[1] += int(r["pred_full"] == r["label"])
        c[2] += int(r["pred_bg"] == r["label"])
        c[3] += int(r["pred_actor"] == r["label"])
    return {k: StreamMetrics(*v) for k, v in streams.items()}


def write_prediction_log(path: str | Path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def report_from_log(path: str | Path, fingerprint: Optional[dict] = None) -> MetricsReport:
    with Path(path).open(newline="") as fh:
        rows = [
            {**r, "label": int(r["label"]), "pred_full": int(r["pred_full"]),
             "pred_bg": int(r["pred_bg"]), "pred_actor": int(r["pred_actor"])}
            for r in csv.DictReader(fh)
        ]
    return MetricsReport(_aggregate(rows), fingerprint or {})


def evaluate(
    predict: Predictor,
    root: str | Path,
    clip_len: int = 16,
    batch_size: int = 16,
    fingerprint: Optional[dict] = None,
    log_path: Optional[str | Path] = None,
) -> MetricsReport:
    """Score ``predict`` on the original, ``bg_only`` and ``actor_only`` clips."""
    clips, labels, names = load_split(root, clip_len)
    variants = {v: load_split(root, clip_len, variant=v)[0] for v in VARIANTS}
    full = predict_split(predict, clips, batch_size)
    bg = predict_split(predict, variants["bg_only"], batch_size)
    actor = predict_split(predict, variants["actor_only"], batch_size)

    rows = []
    for stream in full:
        for i, name in enumerate(names):
            rows.append({
                "video": name,
                "label": int(labels[i]),
                "pred_full": int(full[stream][i]),
                "pred_bg": int(bg[stream][i]),
                "pred_actor": int(actor[stream][i]),
                "stream": stream,
            })
    if log_path is not None:
        write_prediction_log(log_path, rows)
    return MetricsReport(_aggregate(rows), dict(fingerprint or {}))


def _fmt_layers(layers) -> str:
    if not layers:
        return "none"
    return " ".join(str(i) for i in layers)


def compare_runs(reports: Sequence[MetricsReport], path: Optional[str | Path] = None) -> str:
    """Render one CSV row per (norm, direction, stop-gradient, layers, stream)."""
    if not reports:
        raise ValueError("need at least one report")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARE_HEADER)
    for rep in reports:
        fp = rep.fingerprint
        for stream, m in rep.streams.items():
            writer.writerow([
                fp.get("mode", "-"),
                fp.get("direction", "-"),
                fp.get("stop_gradient", "-"),
                _fmt_layers(fp.get("layers")),
                stream,
                f"{m.top1:.4f}",
                f"{m.bor:.4f}",
                f"{m.hor:.4f}",
            ])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# scripted reference readers


def _one_hot(preds: Sequence[int], k: int) -> torch.Tensor:
    out = torch.zeros(len(preds), k)
    out[torch.arange(len(preds)), torch.as_tensor(preds, dtype=torch.long)] = 1.0
    return out


class ConstantClassifier:
    def __init__(self, num_classes: int, label: int = 0, stream: str = "constant"):
        self.num_classes = num_classes
        self.label = label
        self.stream = stream

    def __call__(self, clip: torch.Tensor) -> dict[str, torch.Tensor]:
        return {self.stream: _one_hot([self.label] * clip.shape[0], self.num_classes)}


class MotionReader:
    """Classifies from the trajectory of the bright actor, ignoring the scene.

    The actor is the set of near-white pixels. Clips without a visible actor
    in most frames fall back to ``fallback``.
    """

    def __init__(self, class_patterns: Sequence[str], threshold: float = 0.92,
                 fallback: int = 0, stream: str = "motion"):
        self.class_patterns = list(class_patterns)
        self.threshold = threshold
        self.fallback = fallback
        self.stream = stream

    def pattern(self, clip: torch.Tensor) -> Optional[str]:
        """Motion pattern of one ``[T, 3, H, W]`` clip, or None if no actor."""
        mask = (clip >= self.threshold).all(dim=1).numpy()  # [T, H, W]
        area = mask.sum(axis=(1, 2)).astype(np.float64)
        seen = area > 0
        if seen.sum() < max(2, len(area) // 2):
            return None
        yy, xx = np.mgrid[0:mask.shape[1], 0:mask.shape[2]]
        xs = (mask * xx).sum(axis=(1, 2))[seen] / area[seen]
        ys = (mask * yy).sum(axis=(1, 2))[seen] / area[seen]
        rx, ry = xs.std(), ys.std()
        rel_area = area[seen].std() / area[seen].mean()
        if rx < 0.75 and ry < 0.75:
            return "expanding_pulse" if rel_area > 0.1 else None
        if ry < 0.3 * rx:
            return "horizontal_bounce"
        if rx < 0.3 * ry:
            return "vertical_bounce"
        corr = abs(np.corrcoef(xs, ys)[0, 1])
        return "diagonal_zigzag" if corr > 0.8 else "circular_orbit"

    def __call__(self, clip: torch.Tensor) -> dict[str, torch.Tensor]:
        preds = []
        for c in clip:
            p = self.pattern(c)
            preds.append(self.class_patterns.index(p) if p in self.class_patterns else self.fallback)
        return {self.stream: _one_hot(preds, len(self.class_patterns))}


class BackgroundReader:
    """Classifies from the identity of the background texture only.

    The texture is recognised by nearest palette colour to the per-channel
    median of the first frame; ``fit`` learns the majority class per texture.
    """

    def __init__(self, palette: Sequence[Sequence[float]], num_classes: int,
                 stream: str = "background"):
        self.palette = np.asarray(palette, dtype=np.float64)
        self.num_classes = num_classes
        self.stream = stream
        self.texture_to_class = {j: j % num_classes for j in range(len(self.palette))}

    def texture_id(self, clip: torch.Tensor) -> int:
        median = clip[0].reshape(3, -1).median(dim=1).values.double().numpy()
        return int(np.argmin(((self.palette - median) ** 2).sum(axis=1)))

    def fit(self, clips_u8: torch.Tensor, labels: torch.Tensor) -> BackgroundReader:
        counts = np.zeros((len(self.palette), self.num_classes), dtype=np.int64)
        for clip, y in zip(frames_to_unit(clips_u8), labels.tolist()):
            counts[self.texture_id(clip), y] += 1
        for j in range(len(self.palette)):
            if counts[j].sum():
                self.texture_to_class[j] = int(counts[j].argmax())
        return self

    def __call__(self, clip: torch.Tensor) -> dict[str, torch.Tensor]:
        preds = [self.texture_to_class[self.texture_id(c)] for c in clip]
        return {self.stream: _one_hot(preds, self.num_classes)}

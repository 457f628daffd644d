"""Video corpus I/O, even clip sampling and the synthetic static-bias dataset.

On-disk layout of a corpus rooted at ``root``::

    root/manifest.csv              video_dir,label,num_frames
    root/<video_dir>/frame_00000.png ...
    root/bg_only/<video_dir>/...   actor removed (synthetic sets only)
    root/actor_only/<video_dir>/...  actor on mid-gray (synthetic sets only)
    root/metadata.json             generator spec and per-video scene record

Class labels depend only on the actor's motion pattern. Each class has a
designated background texture, used with probability ``rho``; otherwise the
texture is drawn uniformly from the pool.
"""
from __future__ import annotations

import colorsys
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .edges import frames_to_unit

__all__ = [
    "MOTION_PATTERNS",
    "VARIANTS",
    "SyntheticSceneSpec",
    "clip_indices",
    "sample_clip",
    "read_manifest",
    "load_video",
    "iter_corpus",
    "load_split",
    "generate_dataset",
    "texture_palette",
    "render_texture",
]

MOTION_PATTERNS = (
    "horizontal_bounce",
    "vertical_bounce",
    "circular_orbit",
    "diagonal_zigzag",
    "expanding_pulse",
)
VARIANTS = ("bg_only", "actor_only")
MANIFEST = "manifest.csv"
METADATA = "metadata.json"
MANIFEST_HEADER = ("video_dir", "label", "num_frames")

ACTOR_VALUE = 1.0
ACTOR_ONLY_BACKGROUND = 0.5
TEXTURE_VALUE = 0.55
TEXTURE_SATURATION = 0.55


@dataclass
class SyntheticSceneSpec:
    num_classes: int = 4
    texture_pool_size: int = 8
    rho: float = 0.9
    num_videos: int = 64
    frames_per_video: int = 16
    image_size: int = 32
    actor_size: tuple[int, int] = (4, 7)
    actor_speed: tuple[float, float] = (1.0, 2.5)
    # Amplitude of the grating over each texture's base colour. At 0 the
    # background is flat and invisible to the edge stream; raising it leaks
    # texture identity into the edge domain.
    texture_contrast: float = 0.0
    seed: int = 0
    # Defaults to the first num_classes entries of MOTION_PATTERNS.
    class_patterns: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if not 1 <= self.num_classes <= len(MOTION_PATTERNS):
            raise ValueError(
                f"num_classes must be in [1, {len(MOTION_PATTERNS)}], got {self.num_classes}"
            )
        if self.texture_pool_size < self.num_classes:
            raise ValueError("texture_pool_size must be >= num_classes")
        if not self.class_patterns:
            self.class_patterns = list(MOTION_PATTERNS[: self.num_classes])
        unknown = set(self.class_patterns) - set(MOTION_PATTERNS)
        if unknown or len(self.class_patterns) != self.num_classes:
            raise ValueError(f"bad class_patterns {self.class_patterns}")
        self.actor_size = tuple(int(s) for s in self.actor_size)
        self.actor_speed = tuple(float(s) for s in self.actor_speed)
        lo, hi = self.actor_size
        if not 2 <= lo <= hi <= self.image_size // 3:
            raise ValueError(f"actor_size {self.actor_size} invalid for image {self.image_size}")
        if not 0 < self.actor_speed[0] <= self.actor_speed[1]:
            raise ValueError(f"actor_speed {self.actor_speed} invalid")
        if self.num_videos < 1 or self.frames_per_video < 1:
            raise ValueError("num_videos and frames_per_video must be >= 1")
        if not 0.0 <= self.texture_contrast <= 0.3:
            raise ValueError(f"texture_contrast must be in [0, 0.3], got {self.texture_contrast}")


# ---------------------------------------------------------------------------
# clip sampling


def clip_indices(num_frames: int, clip_len: int) -> list[int]:
    """Evenly spaced indices ``round(i * (F-1) / (T-1))``, halves rounded up."""
    if num_frames < 1:
        raise ValueError("video has no frames")
    if clip_len < 1:
        raise ValueError("clip length must be >= 1")
    if clip_len == 1:
        return [0]
    f, t = num_frames - 1, clip_len - 1
    return [(2 * i * f + t) // (2 * t) for i in range(clip_len)]


def sample_clip(video, clip_len: int):
    """Select ``clip_len`` evenly spaced frames from a frame sequence."""
    idx = clip_indices(len(video), clip_len)
    if isinstance(video, (torch.Tensor, np.ndarray)):
        return video[idx]
    return [video[i] for i in idx]


# ---------------------------------------------------------------------------
# corpus I/O


def read_manifest(root: str | Path) -> list[dict]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
        return [
            {"video_dir": r["video_dir"], "label": int(r["label"]), "num_frames": int(r["num_frames"])}
            for r in reader
        ]


def write_manifest(root: Path, rows: Sequence[dict]) -> None:
    with (root / MANIFEST).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in MANIFEST_HEADER})


def frame_name(i: int) -> str:
    return f"frame_{i:05d}.png"


def load_video(video_dir: str | Path, num_frames: Optional[int] = None) -> np.ndarray:
    """Read sequential 8-bit RGB frames -> ``uint8 [F, H, W, 3]``."""
    video_dir = Path(video_dir)
    if num_frames is None:
        num_frames = len(list(video_dir.glob("frame_*.png")))
    if num_frames < 1:
        raise FileNotFoundError(f"no frames in {video_dir}")
    frames = []
    for i in range(num_frames):
        with Image.open(video_dir / frame_name(i)) as im:
            frames.append(np.asarray(im.convert("RGB")))
    return np.stack(frames)


def _to_clip_tensor(frames_u8: np.ndarray) -> torch.Tensor:
    """``uint8 [F, H, W, 3]`` -> ``uint8 [F, 3, H, W]``."""
    return torch.from_numpy(np.ascontiguousarray(frames_u8.transpose(0, 3, 1, 2)))


def iter_corpus(root: str | Path) -> Iterator[torch.Tensor]:
    """Yield each video as a float ``[1, F, 3, H, W]`` clip in [0, 1]."""
    root = Path(root)
    for row in read_manifest(root):
        frames = load_video(root / row["video_dir"], row["num_frames"])
        yield frames_to_unit(_to_clip_tensor(frames)).unsqueeze(0)


def variant_root(root: str | Path, variant: Optional[str]) -> Path:
    root = Path(root)
    if variant is None:
        return root
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return root / variant


def load_split(
    root: str | Path, clip_len: int, variant: Optional[str] = None
) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Load every video of a corpus as evenly sampled clips.

    Returns ``(clips uint8 [V, T, 3, H, W], labels int64 [V], video_dirs)``.
    """
    rows = read_manifest(root)
    base = variant_root(root, variant)
    if variant is not None:
        missing = [r["video_dir"] for r in rows if not (base / r["video_dir"]).is_dir()]
        if missing:
            raise FileNotFoundError(
                f"{len(missing)} video(s) lack a {variant} variant: {', '.join(missing)}"
            )
    clips = []
    for r in rows:
        frames = load_video(base / r["video_dir"], r["num_frames"])
        clips.append(_to_clip_tensor(sample_clip(frames, clip_len)))
    labels = torch.tensor([r["label"] for r in rows], dtype=torch.long)
    return torch.stack(clips), labels, [r["video_dir"] for r in rows]


def read_metadata(root: str | Path) -> dict:
    return json.loads((Path(root) / METADATA).read_text())


# ---------------------------------------------------------------------------
# synthetic scenes


def texture_palette(pool_size: int) -> np.ndarray:
    """Mean RGB colour of each texture id, hues evenly spaced."""
    return np.array(
        [
            colorsys.hsv_to_rgb(j / pool_size, TEXTURE_SATURATION, TEXTURE_VALUE)
            for j in range(pool_size)
        ]
    )


def render_texture(
    texture_id: int, pool_size: int, size: int, phase: float = 0.0, contrast: float = 0.0
) -> np.ndarray:
    """Texture ``texture_id`` as ``[H, W, 3]``: its base colour plus an oriented grating."""
    base = texture_palette(pool_size)[texture_id]
    angle = math.pi * texture_id / pool_size
    period = 8.0 + 4.0 * (texture_id % 3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx * math.cos(angle) + yy * math.sin(angle)
    wave = contrast * np.sin(2 * math.pi * u / period + phase)
    return np.clip(base[None, None, :] + wave[..., None], 0.0, 1.0)


def _triangle(u: np.ndarray, length: float) -> np.ndarray:
    """Bounce between 0 and ``length``."""
    if length <= 0:
        return np.zeros_like(u)
    return length - np.abs(np.mod(u, 2 * length) - length)


def _trajectory(pattern: str, rng: np.random.Generator, spec: SyntheticSceneSpec, size: int):
    """Per-frame actor centre (x, y) and size for one video."""
    n = spec.frames_per_video
    t = np.arange(n, dtype=np.float64)
    img = spec.image_size
    speed = rng.uniform(*spec.actor_speed)
    half = size / 2.0
    lo, hi = half, img - half
    span = hi - lo
    sizes = np.full(n, float(size))
    if pattern == "horizontal_bounce":
        xs = lo + _triangle(rng.uniform(0, 2 * span) + speed * t, span)
        ys = np.full(n, rng.uniform(lo, hi))
    elif pattern == "vertical_bounce":
        xs = np.full(n, rng.uniform(lo, hi))
        ys = lo + _triangle(rng.uniform(0, 2 * span) + speed * t, span)
    elif pattern == "diagonal_zigzag":
        u = _triangle(rng.uniform(0, 2 * span) + speed * t, span)
        xs = lo + u
        ys = lo + u if rng.random() < 0.5 else hi - u
    elif pattern == "circular_orbit":
        radius = rng.uniform(0.22, 0.32) * img
        radius = min(radius, img / 2 - half - 0.5)
        omega = rng.uniform(0.25, 0.4) * (1 if rng.random() < 0.5 else -1)
        phase = rng.uniform(0, 2 * math.pi)
        c = img / 2.0
        xs = c + radius * np.cos(omega * t + phase)
        ys = c + radius * np.sin(omega * t + phase)
    elif pattern == "expanding_pulse":
        grow = max(3.0, 0.15 * img)
        period = rng.uniform(6.0, 10.0)
        sizes = size + grow * np.abs(np.sin(math.pi * t / period + rng.uniform(0, math.pi)))
        margin = (size + grow) / 2.0
        xs = np.full(n, rng.uniform(margin, img - margin))
        ys = np.full(n, rng.uniform(margin, img - margin))
    else:
        raise ValueError(f"unknown motion pattern {pattern!r}")
    return xs, ys, sizes


def _actor_mask(img: int, cx: float, cy: float, size: float, shape: str) -> np.ndarray:
    yy, xx = np.mgrid[0:img, 0:img].astype(np.float64) + 0.5
    half = size / 2.0
    if shape == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= half * half


def _to_u8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)


def _write_frames(video_dir: Path, frames: Sequence[np.ndarray]) -> None:
    video_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        Image.fromarray(_to_u8(f)).save(video_dir / frame_name(i), format="PNG")


def generate_dataset(spec: SyntheticSceneSpec, out_dir: str | Path) -> list[dict]:
    """Render the synthetic corpus plus its ``bg_only`` and ``actor_only`` variants.

    Returns the manifest rows. Output is a pure function of ``spec``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    img = spec.image_size
    k = spec.num_classes
    labels = rng.permutation(np.arange(spec.num_videos) % k)
    gray = np.full((img, img, 3), ACTOR_ONLY_BACKGROUND)

    rows, records = [], []
    for i, label in enumerate(labels.tolist()):
        if rng.random() < spec.rho:
            texture_id = label
        else:
            texture_id = int(rng.integers(spec.texture_pool_size))
        pattern = spec.class_patterns[label]
        shape = "square" if rng.random() < 0.5 else "disk"
        size = int(rng.integers(spec.actor_size[0], spec.actor_size[1] + 1))
        background = render_texture(
            texture_id, spec.texture_pool_size, img, phase=rng.uniform(0, 2 * math.pi),
            contrast=spec.texture_contrast,
        )
        xs, ys, sizes = _trajectory(pattern, rng, spec, size)

        full, actor_only = [], []
        for cx, cy, s in zip(xs, ys, sizes):
            mask = _actor_mask(img, cx, cy, s, shape)[..., None]
            full.append(np.where(mask, ACTOR_VALUE, background))
            actor_only.append(np.where(mask, ACTOR_VALUE, gray))
        bg_only = [background] * spec.frames_per_video

        name = f"vid_{i:05d}"
        _write_frames(out / name, full)
        _write_frames(out / "bg_only" / name, bg_only)
        _write_frames(out / "actor_only" / name, actor_only)
        rows.append({"video_dir": name, "label": label, "num_frames": spec.frames_per_video})
        records.append(
            {"video_dir": name, "label": label, "texture_id": texture_id,
             "pattern": pattern, "shape": shape, "size": size}
        )

    write_manifest(out, rows)
    meta = {
        "spec": asdict(spec),
        "class_patterns": list(spec.class_patterns),
        "texture_palette": texture_palette(spec.texture_pool_size).tolist(),
        "videos": records,
    }
    (out / METADATA).write_text(json.dumps(meta, indent=1) + "\n")
    return rows

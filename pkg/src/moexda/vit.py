"""Per-frame ViT encoders and the two-stream RGB/edge model.

Each stream encodes frames independently (time folded into the batch),
averages the per-frame class tokens over time and classifies with its own
head. Moment exchange hooks sit between the attention residual and the MLP
pre-norm of the configured layers.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .edges import EDGE_STATS, RGB_STATS, NormalizationStats, make_edge_clip, normalize_input
from .moments import MoExDAConfig, moexda_forward

__all__ = [
    "ViTConfig",
    "StreamOutput",
    "PatchEmbed",
    "MultiHeadAttention",
    "MLP",
    "TransformerBlock",
    "ViTEncoder",
    "TwoStreamViT",
    "save_checkpoint",
    "load_checkpoint",
]

RGB_CHANNELS = 3
EDGE_CHANNELS = 1


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 12
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))


@dataclass
class StreamOutput:
    logits: torch.Tensor
    per_layer_tokens: Optional[list[torch.Tensor]] = None


class PatchEmbed(nn.Module):
    def __init__(self, in_channels: int, patch_size: int, num_patches: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(in_channels * patch_size * patch_size, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1, num_patches + 1, dim))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``[B, T, ch, H, W]`` -> ``[B, T, N+1, C]``."""
        b, t, _, h, w = frames.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"frame size {h}x{w} not divisible by patch size {p}")
        patches = rearrange(frames, "b t c (gh p1) (gw p2) -> b t (gh gw) (c p1 p2)", p1=p, p2=p)
        tokens = self.proj(patches)
        cls = self.cls_token.expand(b, t, 1, -1)
        return torch.cat([cls, tokens], dim=2) + self.pos_embed


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return rearrange(x, "... n (h d) -> ... h n d", h=self.num_heads)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        q, k = self._split(self.q_proj(x)), self._split(self.k_proj(x))
        return torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        attn = self.attention_weights(x)
        out = attn @ self._split(self.v_proj(x))
        return self.out_proj(rearrange(out, "... h n d -> ... n (h d)"))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_hidden: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.mha = MultiHeadAttention(dim, num_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_hidden)

    def attn_residual(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.mha(self.ln1(h))

    def mlp_residual(self, u: torch.Tensor) -> torch.Tensor:
        return u + self.mlp(self.ln2(u))

    def forward(self, h: torch.Tensor, hook: Optional[Callable] = None) -> torch.Tensor:
        u = self.attn_residual(h)
        if hook is not None:
            u = hook(u)
        return self.mlp_residual(u)


class ViTEncoder(nn.Module):
    """One stream: patch embedding, ``L`` blocks, class-token late fusion, head."""

    def __init__(self, cfg: ViTConfig, in_channels: int):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        self.patch_embed = PatchEmbed(in_channels, cfg.patch_size, cfg.num_patches, cfg.embed_dim)
        for i in range(1, cfg.num_layers + 1):
            self.add_module(
                f"block{i}", TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_hidden)
            )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        std = self.cfg.init_std
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.patch_embed.cls_token)
        nn.init.trunc_normal_(self.patch_embed.pos_embed, std=std, a=-2 * std, b=2 * std)

    @property
    def blocks(self) -> list[TransformerBlock]:
        return [getattr(self, f"block{i}") for i in range(1, self.cfg.num_layers + 1)]

    def classify(self, tokens: torch.Tensor) -> torch.Tensor:
        cls = self.norm(tokens[:, :, 0])  # [B, T, C]
        return self.head(cls.mean(dim=1))

    def forward(self, frames: torch.Tensor, keep_tokens: bool = False) -> StreamOutput:
        h = self.patch_embed(frames)
        kept = [h] if keep_tokens else None
        for block in self.blocks:
            h = block(h)
            if kept is not None:
                kept.append(h)
        return StreamOutput(self.classify(h), kept)


class TwoStreamViT(nn.Module):
    """RGB and edge encoders advanced layer by layer in lockstep."""

    def __init__(
        self,
        cfg: ViTConfig,
        moex: Optional[MoExDAConfig] = None,
        rgb_stats: NormalizationStats = RGB_STATS,
        edge_stats: NormalizationStats = EDGE_STATS,
        rgb: Optional[ViTEncoder] = None,
        edge: Optional[ViTEncoder] = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.moex = moex if moex is not None else MoExDAConfig()
        self.rgb_stats = rgb_stats
        self.edge_stats = edge_stats
        self.rgb = rgb if rgb is not None else ViTEncoder(cfg, RGB_CHANNELS)
        self.edge = edge if edge is not None else ViTEncoder(cfg, EDGE_CHANNELS)
        a, b = self.rgb.cfg, self.edge.cfg
        for name in ("num_layers", "embed_dim", "num_heads", "image_size", "patch_size"):
            if getattr(a, name) != getattr(b, name):
                raise ValueError(
                    f"stream config mismatch on {name}: {getattr(a, name)} vs {getattr(b, name)}"
                )
        self.moex.check_depth(cfg.num_layers)

    def prepare_inputs(self, clip: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw ``[B, T, 3, H, W]`` clip in [0, 1] -> normalized stream inputs."""
        x_rgb = normalize_input(clip, self.rgb_stats)
        x_edge = normalize_input(make_edge_clip(clip), self.edge_stats).unsqueeze(2)
        return x_rgb, x_edge

    def forward(
        self, clip: torch.Tensor, keep_tokens: bool = False
    ) -> tuple[StreamOutput, StreamOutput]:
        x_rgb, x_edge = self.prepare_inputs(clip)
        h_rgb = self.rgb.patch_embed(x_rgb)
        h_edge = self.edge.patch_embed(x_edge)
        kept_rgb = [h_rgb] if keep_tokens else None
        kept_edge = [h_edge] if keep_tokens else None
        exchange_at = set(self.moex.layers)
        for i, (blk_rgb, blk_edge) in enumerate(zip(self.rgb.blocks, self.edge.blocks), start=1):
            u_rgb = blk_rgb.attn_residual(h_rgb)
            u_edge = blk_edge.attn_residual(h_edge)
            if i in exchange_at:
                u_rgb, u_edge = moexda_forward(u_rgb, u_edge, self.moex)
            h_rgb = blk_rgb.mlp_residual(u_rgb)
            h_edge = blk_edge.mlp_residual(u_edge)
            if keep_tokens:
                kept_rgb.append(h_rgb)
                kept_edge.append(h_edge)
        return (
            StreamOutput(self.rgb.classify(h_rgb), kept_rgb),
            StreamOutput(self.edge.classify(h_edge), kept_edge),
        )

    @torch.no_grad()
    def predict_logits(self, clip: torch.Tensor) -> dict[str, torch.Tensor]:
        out_rgb, out_edge = self(clip)
        return {"rgb": out_rgb.logits, "edge": out_edge.logits}


CONFIG_KEY = "__config__.json"


def save_checkpoint(path: str | Path, model: nn.Module, config: dict) -> None:
    """Write parameters as little-endian float32 arrays plus the config JSON.

    The archive is a numpy ``.npz``: one entry per dot-separated parameter name
    and a ``__config__.json`` entry holding UTF-8 JSON bytes.
    """
    arrays = {
        name: t.detach().cpu().numpy().astype("<f4") for name, t in model.state_dict().items()
    }
    arrays[CONFIG_KEY] = np.frombuffer(json.dumps(config, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        config = json.loads(archive[CONFIG_KEY].tobytes().decode())
        state = {
            name: torch.from_numpy(archive[name].astype(np.float32))
            for name in archive.files
            if name != CONFIG_KEY
        }
    return state, config


def num_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

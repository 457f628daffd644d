"""Feature moments and cross-stream moment exchange.

Token tensors are ``[B, T, N+1, C]``. Positional normalization (PONO)
reduces over channels, giving moments of shape ``[B, T, N+1]``; instance
normalization (IN) reduces over tokens, giving ``[B, T, C]``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch

__all__ = [
    "Mode",
    "Direction",
    "Moments",
    "MoExDAConfig",
    "compute_moments",
    "exchange_moments",
    "moexda_forward",
]


class Mode(str, enum.Enum):
    PONO = "pono"
    IN = "in"

    @property
    def reduce_dim(self) -> int:
        return -1 if self is Mode.PONO else -2


class Direction(str, enum.Enum):
    EDGE_TO_RGB = "edge_to_rgb"
    RGB_TO_EDGE = "rgb_to_edge"
    BIDIRECTION = "bidirection"


@dataclass
class Moments:
    mean: torch.Tensor
    std: torch.Tensor
    mode: Mode

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean {tuple(self.mean.shape)} != std {tuple(self.std.shape)}")

    def detach(self) -> Moments:
        return Moments(self.mean.detach(), self.std.detach(), self.mode)

    def expand(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Moments with the reduced axis restored, ready to broadcast."""
        d = self.mode.reduce_dim
        return self.mean.unsqueeze(d), self.std.unsqueeze(d)


@dataclass
class MoExDAConfig:
    mode: Mode = Mode.PONO
    direction: Direction = Direction.EDGE_TO_RGB
    stop_gradient: bool = False
    # 1-based transformer layer indices; empty disables exchange.
    layers: list[int] = field(default_factory=list)
    eps: float = 1e-5

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.direction = Direction(self.direction)
        self.layers = sorted(set(int(i) for i in self.layers))
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if any(i < 1 for i in self.layers):
            raise ValueError(f"layer indices are 1-based, got {self.layers}")

    def check_depth(self, num_layers: int) -> None:
        bad = [i for i in self.layers if i > num_layers]
        if bad:
            raise ValueError(f"layers {bad} exceed model depth {num_layers}")


def _check_tokens(h: torch.Tensor) -> None:
    if h.dim() != 4:
        raise ValueError(f"expected [B, T, N+1, C] tokens, got shape {tuple(h.shape)}")
    if h.shape[-2] < 2 or h.shape[-1] < 1:
        raise ValueError(f"need N+1 >= 2 tokens and C >= 1, got shape {tuple(h.shape)}")


def compute_moments(h: torch.Tensor, mode: Mode | str = Mode.PONO, eps: float = 1e-5) -> Moments:
    """Population mean and ``sqrt(var + eps)`` along the mode's reduction axis."""
    _check_tokens(h)
    mode = Mode(mode)
    d = mode.reduce_dim
    mean = h.mean(dim=d)
    var = h.var(dim=d, unbiased=False)
    return Moments(mean, torch.sqrt(var + eps), mode)


def exchange_moments(h_src: torch.Tensor, m_src: Moments, m_tgt: Moments) -> torch.Tensor:
    """Re-normalize ``h_src`` from its own moments to the target moments."""
    if m_src.mode != m_tgt.mode:
        raise ValueError(f"moment modes differ: {m_src.mode.value} vs {m_tgt.mode.value}")
    if m_src.mean.shape != m_tgt.mean.shape:
        raise ValueError(
            f"moment shapes differ: {tuple(m_src.mean.shape)} vs {tuple(m_tgt.mean.shape)}"
        )
    mu_s, sd_s = m_src.expand()
    mu_t, sd_t = m_tgt.expand()
    return (h_src - mu_s) / sd_s * sd_t + mu_t


def moexda_forward(
    h_rgb: torch.Tensor, h_edge: torch.Tensor, cfg: MoExDAConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply the configured exchange; returns ``(rgb_out, edge_out)``.

    Both directions read moments of the pre-exchange tensors. With
    ``stop_gradient`` the donated (other-stream) moments are detached, while
    the receiving stream's own moments stay in the graph.
    """
    if h_rgb.shape != h_edge.shape:
        raise ValueError(f"stream shapes differ: {tuple(h_rgb.shape)} vs {tuple(h_edge.shape)}")
    m_rgb = compute_moments(h_rgb, cfg.mode, cfg.eps)
    m_edge = compute_moments(h_edge, cfg.mode, cfg.eps)
    donor_rgb = m_rgb.detach() if cfg.stop_gradient else m_rgb
    donor_edge = m_edge.detach() if cfg.stop_gradient else m_edge

    rgb_out, edge_out = h_rgb, h_edge
    if cfg.direction in (Direction.EDGE_TO_RGB, Direction.BIDIRECTION):
        edge_out = exchange_moments(h_edge, m_edge, donor_rgb)
    if cfg.direction in (Direction.RGB_TO_EDGE, Direction.BIDIRECTION):
        rgb_out = exchange_moments(h_rgb, m_rgb, donor_edge)
    return rgb_out, edge_out

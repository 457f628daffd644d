"""Central finite-difference checks for the exchange module and the full model.

With stop-gradient enabled the analytic gradient treats donated moments as
constants, so the finite-difference side holds them frozen at the values
they take on the unperturbed inputs.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import torch

from . import vit as vit_module
from .moments import Direction, MoExDAConfig, Mode, Moments, compute_moments, exchange_moments
from .training import LossWeights, total_loss
from .vit import TwoStreamViT, ViTConfig

__all__ = [
    "GradCheckResult",
    "central_difference",
    "relative_error",
    "all_moex_configs",
    "check_moexda",
    "check_model",
    "tiny_vit_config",
]

MODULE_TOL = 1e-4
MODEL_TOL = 1e-3
# Exact-zero gradients (e.g. attention key bias) leave only rounding noise of
# order 1e-12 on the finite-difference side.
ZERO_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tol


def relative_error(
    analytic: torch.Tensor, numeric: torch.Tensor, zero_floor: float = ZERO_FLOOR
) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both norms are below ``zero_floor``."""
    denom = max(float(analytic.norm()), float(numeric.norm()))
    if denom <= zero_floor:
        return 0.0
    return float((analytic - numeric).norm()) / denom


def central_difference(
    f: Callable[[], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-4,
    coords: Optional[Sequence[int]] = None,
) -> torch.Tensor:
    """d f / d x by central differences, perturbing ``x`` in place.

    ``coords`` restricts the estimate to those flat indices (others stay 0).
    """
    grad = torch.zeros_like(x)
    flat_x, flat_g = x.data.view(-1), grad.view(-1)
    idx = range(flat_x.numel()) if coords is None else coords
    with torch.no_grad():
        for i in idx:
            orig = flat_x[i].item()
            flat_x[i] = orig + step
            plus = f().item()
            flat_x[i] = orig - step
            minus = f().item()
            flat_x[i] = orig
            flat_g[i] = (plus - minus) / (2 * step)
    return grad


def all_moex_configs(layers: Sequence[int] = (1,)) -> list[MoExDAConfig]:
    return [
        MoExDAConfig(mode=m, direction=d, stop_gradient=sg, layers=list(layers))
        for m, d, sg in itertools.product(Mode, Direction, (False, True))
    ]


def config_name(cfg: MoExDAConfig) -> str:
    sg = "sg" if cfg.stop_gradient else "nosg"
    return f"{cfg.mode.value}/{cfg.direction.value}/{sg}"


def _frozen_exchange(h_rgb, h_edge, donor_rgb: Moments, donor_edge: Moments, cfg: MoExDAConfig):
    """The exchange with donated moments supplied from outside."""
    m_rgb = compute_moments(h_rgb, cfg.mode, cfg.eps)
    m_edge = compute_moments(h_edge, cfg.mode, cfg.eps)
    rgb_out, edge_out = h_rgb, h_edge
    if cfg.direction in (Direction.EDGE_TO_RGB, Direction.BIDIRECTION):
        edge_out = exchange_moments(h_edge, m_edge, donor_rgb)
    if cfg.direction in (Direction.RGB_TO_EDGE, Direction.BIDIRECTION):
        rgb_out = exchange_moments(h_rgb, m_rgb, donor_edge)
    return rgb_out, edge_out


def check_moexda(
    cfg: MoExDAConfig, shape=(1, 2, 5, 4), seed: int = 0, step: float = 1e-4
) -> GradCheckResult:
    """Gradient of a random linear read-out of both exchange outputs."""
    from .moments import moexda_forward

    gen = torch.Generator().manual_seed(seed)
    h_rgb = torch.randn(shape, generator=gen, dtype=torch.float64)
    h_edge = 0.5 * torch.randn(shape, generator=gen, dtype=torch.float64) + 0.3
    w_rgb = torch.randn(shape, generator=gen, dtype=torch.float64)
    w_edge = torch.randn(shape, generator=gen, dtype=torch.float64)

    a_rgb = h_rgb.clone().requires_grad_(True)
    a_edge = h_edge.clone().requires_grad_(True)
    out_rgb, out_edge = moexda_forward(a_rgb, a_edge, cfg)
    ((w_rgb * out_rgb).sum() + (w_edge * out_edge).sum()).backward()
    analytic = torch.cat([a_rgb.grad.view(-1), a_edge.grad.view(-1)])

    base_rgb = compute_moments(h_rgb, cfg.mode, cfg.eps)
    base_edge = compute_moments(h_edge, cfg.mode, cfg.eps)
    x_rgb, x_edge = h_rgb.clone(), h_edge.clone()

    def f():
        if cfg.stop_gradient:
            donor_rgb, donor_edge = base_rgb, base_edge
        else:
            donor_rgb = compute_moments(x_rgb, cfg.mode, cfg.eps)
            donor_edge = compute_moments(x_edge, cfg.mode, cfg.eps)
        o_rgb, o_edge = _frozen_exchange(x_rgb, x_edge, donor_rgb, donor_edge, cfg)
        return (w_rgb * o_rgb).sum() + (w_edge * o_edge).sum()

    numeric = torch.cat([
        central_difference(f, x_rgb, step).view(-1),
        central_difference(f, x_edge, step).view(-1),
    ])
    return GradCheckResult(f"moexda {config_name(cfg)}", relative_error(analytic, numeric), MODULE_TOL)


def tiny_vit_config() -> ViTConfig:
    return ViTConfig(image_size=8, patch_size=4, embed_dim=8, num_layers=2, num_heads=2,
                     mlp_ratio=4.0, num_classes=3)


@contextmanager
def _replay_donors(frozen: list) -> Iterator[None]:
    """Patch the model's exchange so donated moments come from ``frozen``.

    If ``frozen`` is empty it is filled with the donated moments of one
    forward pass; afterwards those values are replayed in layer order.
    """
    original = vit_module.moexda_forward
    recording = not frozen
    counter = itertools.count()

    def patched(h_rgb, h_edge, cfg):
        if recording:
            donors = (compute_moments(h_rgb, cfg.mode, cfg.eps).detach(),
                      compute_moments(h_edge, cfg.mode, cfg.eps).detach())
            frozen.append(donors)
            return original(h_rgb, h_edge, cfg)
        donor_rgb, donor_edge = frozen[next(counter) % len(frozen)]
        return _frozen_exchange(h_rgb, h_edge, donor_rgb, donor_edge, cfg)

    vit_module.moexda_forward = patched
    try:
        yield
    finally:
        vit_module.moexda_forward = original


def build_tiny_model(moex: MoExDAConfig, seed: int = 0, param_std: float = 0.3) -> TwoStreamViT:
    """Float64 tiny model with all parameters redrawn so gradients are O(1)."""
    torch.manual_seed(seed)
    model = TwoStreamViT(tiny_vit_config(), moex).double()
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=p.dtype) * param_std
            if name.endswith(("ln1.weight", "ln2.weight", "norm.weight")):
                p.copy_(1.0 + noise)
            else:
                p.copy_(noise)
    return model


def check_model(
    moex: MoExDAConfig,
    weights: Optional[LossWeights] = None,
    seed: int = 0,
    step: float = 1e-4,
    max_coords: Optional[int] = None,
) -> list[GradCheckResult]:
    """Per-parameter-tensor check of the total two-stream loss.

    ``max_coords`` limits each tensor to that many randomly chosen entries.
    """
    weights = weights or LossWeights()
    model = build_tiny_model(moex, seed)
    cfg = model.cfg
    gen = torch.Generator().manual_seed(seed + 2)
    clip = torch.rand(1, 2, 3, cfg.image_size, cfg.image_size, generator=gen, dtype=torch.float64)
    labels = torch.tensor([1])

    def loss_fn():
        out_rgb, out_edge = model(clip)
        return total_loss(out_rgb.logits, out_edge.logits, labels, weights)

    frozen: list = []
    if moex.stop_gradient:
        with _replay_donors(frozen):
            model.zero_grad()
            loss_fn().backward()
    else:
        model.zero_grad()
        loss_fn().backward()

    results = []
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        coords = None
        if max_coords is not None and p.numel() > max_coords:
            coords = torch.randperm(p.numel(), generator=gen)[:max_coords].tolist()
        if moex.stop_gradient:
            with _replay_donors(frozen):
                numeric = central_difference(loss_fn, p, step, coords)
        else:
            numeric = central_difference(loss_fn, p, step, coords)
        if coords is not None:
            analytic = analytic.view(-1)[coords]
            numeric = numeric.view(-1)[coords]
        results.append(GradCheckResult(f"model {config_name(moex)} {name}",
                                       relative_error(analytic, numeric), MODEL_TOL))
    return results

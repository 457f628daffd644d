"""Two-stream RGB/edge action recognition with moment exchange between streams."""
from .edges import EDGE_STATS, RGB_STATS, NormalizationStats, make_edge_clip, normalize_input
from .moments import Direction, Mode, MoExDAConfig, compute_moments, exchange_moments, moexda_forward
from .vit import TwoStreamViT, ViTConfig

__version__ = "0.1.0"

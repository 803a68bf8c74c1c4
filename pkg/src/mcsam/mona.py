"""Multi-cognitive (Mona) adapter block.

The block applies a scaled layer norm, projects channels down to a narrow
bottleneck, aggregates the bottleneck features with several depthwise
convolutions of different kernel sizes, mixes channels with a 1x1
convolution, and projects back up through a GeLU. The up-projection is
zero-initialized so that a freshly inserted adapter is an exact no-op once
the caller adds the surrounding residual.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from mcsam.exceptions import ConfigurationError, NumericError


@dataclass
class MonaConfig:
    input_channels: int
    bottleneck_channels: int = 64
    kernel_sizes: tuple = (3, 5, 7)
    norm_epsilon: float = 1e-6

    def __post_init__(self):
        self.kernel_sizes = tuple(self.kernel_sizes)
        if self.input_channels <= 0:
            raise ConfigurationError("input_channels must be positive")
        if not 0 < self.bottleneck_channels < self.input_channels:
            raise ConfigurationError(
                "bottleneck_channels must be in (0, input_channels); got "
                f"{self.bottleneck_channels} for {self.input_channels} channels"
            )
        if not self.kernel_sizes:
            raise ConfigurationError("kernel_sizes must be non-empty")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"kernel sizes must be odd and >= 1, got {k}")
        if self.norm_epsilon <= 0:
            raise ConfigurationError("norm_epsilon must be positive")


def mona_param_count(cfg: MonaConfig) -> int:
    """Exact trainable-parameter total of one Mona block."""
    c, b = cfg.input_channels, cfg.bottleneck_channels
    scales = 2
    norm = 2 * c
    down = c * b + b
    dwconv = sum(k * k * b + b for k in cfg.kernel_sizes)
    pointwise = b * b + b
    up = b * c + c
    return scales + norm + down + dwconv + pointwise + up


class Mona(nn.Module):
    """One Mona adapter. Input and output are (B, H, W, C) feature grids.

    Returns the adapter delta only; the caller adds the residual. At
    initialization the delta is exactly zero (zero up-projection), so
    ``x + mona(x)`` is the identity map.
    """

    def __init__(self, cfg: MonaConfig):
        super().__init__()
        self.cfg = cfg
        c, b = cfg.input_channels, cfg.bottleneck_channels
        self.scale_norm = nn.Parameter(torch.tensor(1.0))  # S1
        self.scale_skip = nn.Parameter(torch.tensor(0.0))  # S2
        self.norm = nn.LayerNorm(c, eps=cfg.norm_epsilon)
        self.down_proj = nn.Linear(c, b)
        self.dw_convs = nn.ModuleList(
            nn.Conv2d(b, b, k, padding=k // 2, groups=b) for k in cfg.kernel_sizes
        )
        self.pointwise = nn.Conv2d(b, b, 1)
        self.up_proj = nn.Linear(b, c)
        nn.init.zeros_(self.up_proj.weight)
        nn.init.zeros_(self.up_proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:  # single (H, W, C) grid
            return self.forward(x.unsqueeze(0)).squeeze(0)
        if x.shape[-1] != self.cfg.input_channels:
            raise ConfigurationError(
                f"expected {self.cfg.input_channels} channels, got {x.shape[-1]}"
            )
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values in Mona input")
        gated = self.norm(x) * self.scale_norm + x * self.scale_skip
        down = self.down_proj(gated)
        grid = down.permute(0, 3, 1, 2)
        filtered = torch.stack([conv(grid) for conv in self.dw_convs]).mean(dim=0)
        agg = grid + filtered
        agg = agg + self.pointwise(agg)
        agg = agg.permute(0, 2, 3, 1)
        return self.up_proj(F.gelu(agg))

"""Aggregation neck fusing intermediate encoder features.

A shared 1x1 convolution reduces every tap to a common width, the reduced
maps are summed, and two 3x3 conv blocks project the fusion to the
encoder's output width so it can be added to the final encoder map.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from mcsam.encoder import LayerNorm2d
from mcsam.exceptions import ConfigurationError, ShapeError


@dataclass
class AggregatorConfig:
    in_channels: int
    mid_channels: int = 256
    out_channels: int = 256
    num_taps: int = 4
    norm: str = "ln2d"  # "ln2d" | "none"

    def __post_init__(self):
        if self.num_taps < 1:
            raise ConfigurationError("num_taps must be >= 1")
        if self.norm not in ("ln2d", "none"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, norm="ln2d"):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.norm = LayerNorm2d(out_ch) if norm == "ln2d" else nn.Identity()
        self.act = nn.GELU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class FeatureAggregator(nn.Module):
    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        self.cfg = cfg
        self.reduce = nn.Conv2d(cfg.in_channels, cfg.mid_channels, kernel_size=1)
        self.block1 = ConvBlock(cfg.mid_channels, cfg.mid_channels, cfg.norm)
        self.block2 = ConvBlock(cfg.mid_channels, cfg.out_channels, cfg.norm)

    def fuse(self, taps) -> torch.Tensor:
        """Reduce each tap with the shared 1x1 conv and sum."""
        if len(taps) == 0:
            raise ShapeError("tap list is empty")
        if len(taps) != self.cfg.num_taps:
            raise ShapeError(f"expected {self.cfg.num_taps} taps, got {len(taps)}")
        shape = taps[0].shape
        for t in taps[1:]:
            if t.shape != shape:
                raise ShapeError(f"mixed tap shapes: {tuple(t.shape)} vs {tuple(shape)}")
        fused = self.reduce(taps[0])
        for t in taps[1:]:
            fused = fused + self.reduce(t)
        return fused

    def forward(self, taps) -> torch.Tensor:
        return self.block2(self.block1(self.fuse(taps)))


def fuse_with_encoder(final_map: torch.Tensor, neck: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of the encoder's final map and the aggregated neck."""
    if final_map.shape != neck.shape:
        raise ShapeError(
            f"shape mismatch: {tuple(final_map.shape)} vs {tuple(neck.shape)}"
        )
    return final_map + neck

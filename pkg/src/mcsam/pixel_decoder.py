"""Deformable-attention pixel decoder.

Expands the stride-16 encoder map into a {32, 16, 8} feature pyramid,
refines the pyramid with deformable-attention encoder layers, and derives
a stride-4 per-pixel embedding map used for mask prediction.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from mcsam.deform_attn import MSDeformAttention, level_reference_points
from mcsam.exceptions import ConfigurationError
from mcsam.position import PositionEmbeddingSine


@dataclass
class PixelDecoderConfig:
    conv_dim: int = 256
    mask_dim: int = 256
    num_layers: int = 6
    num_heads: int = 8
    num_points: int = 4
    ffn_dim: int = 1024


@dataclass
class PyramidLevels:
    levels: list  # coarse-to-fine maps at strides 32, 16, 8
    mask_features: torch.Tensor  # stride-4 map with mask_dim channels


class DeformableEncoderLayer(nn.Module):
    def __init__(self, dim, num_heads, num_levels, num_points, ffn_dim):
        super().__init__()
        self.self_attn = MSDeformAttention(dim, num_heads, num_levels, num_points)
        self.norm1 = nn.LayerNorm(dim)
        self.linear1 = nn.Linear(dim, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, src, pos, reference_points, spatial_shapes):
        attn = self.self_attn(src + pos, reference_points, src, spatial_shapes)
        src = self.norm1(src + attn)
        ffn = self.linear2(F.relu(self.linear1(src)))
        return self.norm2(src + ffn)


class PixelDecoder(nn.Module):
    def __init__(self, cfg: PixelDecoderConfig, in_channels: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.conv_dim
        self.down = nn.Conv2d(in_channels, d, kernel_size=3, stride=2, padding=1)
        self.lateral = nn.Conv2d(in_channels, d, kernel_size=1)
        self.up = nn.ConvTranspose2d(in_channels, d, kernel_size=2, stride=2)
        self.pos = PositionEmbeddingSine(d // 2)
        self.level_embed = nn.Parameter(torch.zeros(3, d))
        nn.init.normal_(self.level_embed)
        self.layers = nn.ModuleList(
            DeformableEncoderLayer(d, cfg.num_heads, 3, cfg.num_points, cfg.ffn_dim)
            for _ in range(cfg.num_layers)
        )
        self.mask_up = nn.ConvTranspose2d(d, d, kernel_size=2, stride=2)
        self.mask_proj = nn.Conv2d(d, cfg.mask_dim, kernel_size=3, padding=1)

    def forward(self, f_enc: torch.Tensor) -> PyramidLevels:
        if f_enc.dim() != 4:
            raise ConfigurationError(f"expected (B, C, H, W), got {tuple(f_enc.shape)}")
        H, W = f_enc.shape[-2:]
        if H != W:
            raise ConfigurationError(f"pixel decoder requires square input, got {H}x{W}")
        if H < 4:
            raise ConfigurationError(
                f"input {H}x{W} too small: coarsest level would be under 2x2"
            )
        levels = [self.down(f_enc), self.lateral(f_enc), self.up(f_enc)]
        shapes = [tuple(l.shape[-2:]) for l in levels]
        pos = [self.pos(l) for l in levels]
        src_flat = torch.cat([l.flatten(2).transpose(1, 2) for l in levels], dim=1)
        pos_flat = torch.cat(
            [
                p.flatten(2).transpose(1, 2) + self.level_embed[i][None, None]
                for i, p in enumerate(pos)
            ],
            dim=1,
        )
        ref = level_reference_points(shapes, device=f_enc.device, dtype=f_enc.dtype)
        ref = ref.expand(f_enc.shape[0], -1, -1, -1)
        for layer in self.layers:
            src_flat = layer(src_flat, pos_flat, ref, shapes)
        out_levels = []
        start = 0
        for (h, w) in shapes:
            out_levels.append(
                src_flat[:, start : start + h * w].transpose(1, 2).reshape(-1, self.cfg.conv_dim, h, w)
            )
            start += h * w
        mask_features = self.mask_proj(F.gelu(self.mask_up(out_levels[-1])))
        return PyramidLevels(levels=out_levels, mask_features=mask_features)

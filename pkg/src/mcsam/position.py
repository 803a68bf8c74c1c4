"""Sine positional encodings for feature maps."""

import math

import torch
import torch.nn as nn


class PositionEmbeddingSine(nn.Module):
    """Fixed 2D sine/cosine position embedding over (B, C, H, W) maps."""

    def __init__(self, num_pos_feats: int, temperature: int = 10000):
        super().__init__()
        self.num_pos_feats = num_pos_feats
        self.temperature = temperature
        self.scale = 2 * math.pi

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, _, H, W = x.shape
        device, dtype = x.device, x.dtype
        y_embed = torch.arange(1, H + 1, dtype=dtype, device=device)[None, :, None].expand(B, H, W)
        x_embed = torch.arange(1, W + 1, dtype=dtype, device=device)[None, None, :].expand(B, H, W)
        eps = 1e-6
        y_embed = y_embed / (H + eps) * self.scale
        x_embed = x_embed / (W + eps) * self.scale
        dim_t = torch.arange(self.num_pos_feats, dtype=dtype, device=device)
        dim_t = self.temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / self.num_pos_feats)
        pos_x = x_embed[:, :, :, None] / dim_t
        pos_y = y_embed[:, :, :, None] / dim_t
        pos_x = torch.stack((pos_x[..., 0::2].sin(), pos_x[..., 1::2].cos()), dim=4).flatten(3)
        pos_y = torch.stack((pos_y[..., 0::2].sin(), pos_y[..., 1::2].cos()), dim=4).flatten(3)
        return torch.cat((pos_y, pos_x), dim=3).permute(0, 3, 1, 2)

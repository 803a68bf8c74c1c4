"""Multi-scale deformable attention.

Each query predicts, per head and pyramid level, a small set of sampling
offsets around its reference point plus attention weights softmaxed jointly
over all levels and points. Values are gathered by bilinear interpolation
and combined by the weights. Sampling locations are expressed in [0, 1]^2
normalized coordinates; out-of-range locations are clamped to the border
rather than rejected.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from mcsam.exceptions import ConfigurationError, ShapeError


def deform_attn_core(value, spatial_shapes, sampling_locations, attention_weights):
    """Deformable sampling with grid_sample.

    value: (B, sum(H*W), heads, head_dim) flattened pyramid
    spatial_shapes: [(H, W), ...] per level
    sampling_locations: (B, Lq, heads, levels, points, 2) as (x, y) in [0, 1]
    attention_weights: (B, Lq, heads, levels, points)
    returns (B, Lq, heads * head_dim)
    """
    B, _, n_heads, head_dim = value.shape
    _, Lq, _, n_levels, n_points, _ = sampling_locations.shape
    value_list = value.split([h * w for h, w in spatial_shapes], dim=1)
    grids = 2 * sampling_locations.clamp(0.0, 1.0) - 1
    sampled = []
    for lvl, (H, W) in enumerate(spatial_shapes):
        v = value_list[lvl].permute(0, 2, 3, 1).reshape(B * n_heads, head_dim, H, W)
        grid = grids[:, :, :, lvl].transpose(1, 2).flatten(0, 1)  # (B*heads, Lq, points, 2)
        sampled.append(
            F.grid_sample(v, grid, mode="bilinear", padding_mode="border", align_corners=False)
        )
    stacked = torch.stack(sampled, dim=-2)  # (B*heads, head_dim, Lq, levels, points)
    attn = attention_weights.transpose(1, 2).reshape(B * n_heads, 1, Lq, n_levels, n_points)
    out = (stacked * attn).sum(dim=(-2, -1))
    return out.view(B, n_heads, head_dim, Lq).permute(0, 3, 1, 2).reshape(B, Lq, n_heads * head_dim)


class MSDeformAttention(nn.Module):
    def __init__(self, embed_dim=256, num_heads=8, num_levels=3, num_points=4):
        super().__init__()
        if embed_dim % num_heads != 0:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if num_levels < 1:
            raise ConfigurationError("deformable attention needs at least one level")
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        total = num_heads * num_levels * num_points
        self.sampling_offsets = nn.Linear(embed_dim, total * 2)
        self.attention_weights = nn.Linear(embed_dim, total)
        self.value_proj = nn.Linear(embed_dim, embed_dim)
        self.output_proj = nn.Linear(embed_dim, embed_dim)
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.zeros_(self.sampling_offsets.weight)
        thetas = torch.arange(self.num_heads, dtype=torch.float32) * (2.0 * math.pi / self.num_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True).values
        grid = grid.view(self.num_heads, 1, 1, 2).repeat(1, self.num_levels, self.num_points, 1)
        for p in range(self.num_points):
            grid[:, :, p] *= p + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.flatten())
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, query, reference_points, value, spatial_shapes):
        """query (B, Lq, C); reference_points (B, Lq, levels, 2) in [0, 1]
        (x, y); value (B, sum(H*W), C) flattened coarse-to-fine pyramid."""
        if len(spatial_shapes) == 0:
            raise ConfigurationError("empty pyramid")
        if len(spatial_shapes) != self.num_levels:
            raise ConfigurationError(
                f"expected {self.num_levels} pyramid levels, got {len(spatial_shapes)}"
            )
        if value.shape[1] != sum(h * w for h, w in spatial_shapes):
            raise ShapeError("flattened value length does not match spatial shapes")
        B, Lq = query.shape[:2]
        v = self.value_proj(value).view(B, -1, self.num_heads, self.embed_dim // self.num_heads)
        offsets = self.sampling_offsets(query).view(
            B, Lq, self.num_heads, self.num_levels, self.num_points, 2
        )
        weights = self.attention_weights(query).view(
            B, Lq, self.num_heads, self.num_levels * self.num_points
        )
        weights = weights.softmax(-1).view(B, Lq, self.num_heads, self.num_levels, self.num_points)
        normalizer = torch.tensor(
            [[w, h] for h, w in spatial_shapes], dtype=query.dtype, device=query.device
        )
        locations = (
            reference_points[:, :, None, :, None, :]
            + offsets / normalizer[None, None, None, :, None, :]
        )
        out = deform_attn_core(v, spatial_shapes, locations, weights)
        return self.output_proj(out)


def level_reference_points(spatial_shapes, device=None, dtype=torch.float32):
    """Pixel-center reference points for every location of a flattened
    pyramid, replicated across levels: (1, sum(H*W), levels, 2)."""
    points = []
    for H, W in spatial_shapes:
        ys = (torch.arange(H, device=device, dtype=dtype) + 0.5) / H
        xs = (torch.arange(W, device=device, dtype=dtype) + 0.5) / W
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        points.append(torch.stack([gx, gy], dim=-1).view(-1, 2))
    ref = torch.cat(points, dim=0)
    return ref[None, :, None, :].expand(1, -1, len(spatial_shapes), -1)

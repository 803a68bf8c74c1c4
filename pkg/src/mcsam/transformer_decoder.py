"""Masked-attention transformer decoder.

A fixed set of learnable query tokens attends to the pixel-decoder pyramid
one level per layer, cycling coarse to fine. Cross-attention is restricted
to the foreground of each query's previous mask prediction; queries whose
mask thresholds to all-background fall back to unmasked attention. Every
layer emits an auxiliary prediction for deep supervision.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from mcsam.exceptions import ConfigurationError, ShapeError
from mcsam.pixel_decoder import PyramidLevels
from mcsam.position import PositionEmbeddingSine


@dataclass
class DecoderConfig:
    num_queries: int = 100
    num_layers: int = 9
    hidden_dim: int = 256
    num_heads: int = 8
    ffn_dim: int = 2048
    num_classes: int = 1
    mask_threshold: float = 0.5

    def __post_init__(self):
        if self.num_queries < 1:
            raise ConfigurationError("num_queries must be >= 1")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ConfigurationError("mask_threshold must lie in (0, 1)")


@dataclass
class InstancePrediction:
    class_logits: torch.Tensor  # (B, Q, num_classes + 1), last slot = no object
    mask_logits: torch.Tensor  # (B, Q, h, w) at the mask-feature resolution
    aux_outputs: list = None  # per-layer predictions; last equals the final one


class MultiheadAttention(nn.Module):
    """Plain multi-head attention with an optional boolean blocking mask.

    A mask entry of True blocks that query-key pair. The unmasked path and
    an all-False mask take the same numeric route, so they agree bitwise.
    """

    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigurationError("hidden dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query, key, value, mask=None):
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        logits = (q * self.scale) @ k.transpose(-2, -1)  # (B, heads, Lq, Lk)
        if mask is not None:
            logits = logits.masked_fill(mask, float("-inf"))
        attn = logits.softmax(dim=-1)
        out = attn @ v
        B, _, Lq, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(B, Lq, -1))


class MLP(nn.Module):
    def __init__(self, in_dim, hidden_dim, out_dim, num_layers):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(
            nn.Linear(d_in, d_out) for d_in, d_out in zip(dims, dims[1:] + [out_dim])
        )

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class DecoderLayer(nn.Module):
    def __init__(self, dim, num_heads, ffn_dim):
        super().__init__()
        self.cross_attn = MultiheadAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiheadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.linear1 = nn.Linear(dim, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, query, query_pos, src, src_pos, attn_mask=None):
        x = self.cross_attn(query + query_pos, src + src_pos, src, mask=attn_mask)
        query = self.norm1(query + x)
        qk = query + query_pos
        x = self.self_attn(qk, qk, query)
        query = self.norm2(query + x)
        x = self.linear2(F.relu(self.linear1(query)))
        return self.norm3(query + x)


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, in_channels: int, mask_dim: int, num_levels: int = 3):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.num_levels = num_levels
        self.query_feat = nn.Embedding(cfg.num_queries, d)
        self.query_embed = nn.Embedding(cfg.num_queries, d)
        self.level_embed = nn.Embedding(num_levels, d)
        self.input_proj = nn.ModuleList(
            nn.Conv2d(in_channels, d, kernel_size=1) if in_channels != d else nn.Identity()
            for _ in range(num_levels)
        )
        self.pos = PositionEmbeddingSine(d // 2)
        self.layers = nn.ModuleList(
            DecoderLayer(d, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.num_layers)
        )
        self.decoder_norm = nn.LayerNorm(d)
        self.class_head = nn.Linear(d, cfg.num_classes + 1)
        self.mask_head = MLP(d, d, mask_dim, 3)

    def predict_classes(self, queries: torch.Tensor) -> torch.Tensor:
        """Per-query class logits with a trailing no-object slot."""
        return self.class_head(self.decoder_norm(queries))

    def predict_masks(self, queries: torch.Tensor, mask_features: torch.Tensor) -> torch.Tensor:
        """Mask logits as the per-pixel inner product between projected
        queries and the mask-feature map."""
        embed = self.mask_head(self.decoder_norm(queries))
        if embed.shape[-1] != mask_features.shape[1]:
            raise ShapeError(
                f"mask embedding width {embed.shape[-1]} does not match "
                f"mask features {mask_features.shape[1]}"
            )
        return torch.einsum("bqc,bchw->bqhw", embed, mask_features)

    def _predict(self, queries, mask_features):
        return InstancePrediction(
            class_logits=self.predict_classes(queries),
            mask_logits=self.predict_masks(queries, mask_features),
        )

    def attention_mask(self, mask_logits, level_hw):
        """Blocking mask for the next layer: True where the previous mask
        prediction, resized to the level, is background. Queries whose mask
        is entirely background fall back to unmasked attention."""
        probs = mask_logits.sigmoid()
        resized = F.interpolate(probs, size=level_hw, mode="bilinear", align_corners=False)
        blocked = (resized < self.cfg.mask_threshold).flatten(2)  # (B, Q, HW)
        all_blocked = blocked.all(dim=-1)
        blocked = blocked & ~all_blocked[..., None]
        return blocked[:, None].expand(-1, self.cfg.num_heads, -1, -1)

    def forward(self, pyramid: PyramidLevels) -> InstancePrediction:
        feats = [proj(lvl) for proj, lvl in zip(self.input_proj, pyramid.levels)]
        shapes = [tuple(f.shape[-2:]) for f in feats]
        srcs = [
            f.flatten(2).transpose(1, 2) + self.level_embed.weight[i][None, None]
            for i, f in enumerate(feats)
        ]
        poss = [self.pos(f).flatten(2).transpose(1, 2) for f in feats]
        B = feats[0].shape[0]
        query = self.query_feat.weight[None].expand(B, -1, -1)
        query_pos = self.query_embed.weight[None].expand(B, -1, -1)
        predictions = []
        attn_mask = None  # first layer attends unmasked
        for i, layer in enumerate(self.layers):
            lvl = i % self.num_levels
            query = layer(query, query_pos, srcs[lvl], poss[lvl], attn_mask)
            pred = self._predict(query, pyramid.mask_features)
            predictions.append(pred)
            if i + 1 < len(self.layers):
                attn_mask = self.attention_mask(pred.mask_logits, shapes[(i + 1) % self.num_levels])
        final = predictions[-1]
        return InstancePrediction(final.class_logits, final.mask_logits, aux_outputs=predictions)

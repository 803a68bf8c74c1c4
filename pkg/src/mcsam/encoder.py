"""ViT image encoder with per-block adapter slots.

The encoder mirrors the SAM image-encoder layout (patch embedding,
pre-norm transformer blocks with optional windowed attention and
decomposed relative positions, and a two-conv neck) so that published SAM
ViT-B weights import by name. Each block exposes two adapter insertion
sites, one after the attention residual and one after the MLP residual;
blocks are registered as ``block0 .. block{L-1}`` so adapter parameters
serialize under ``encoder.block{L}.mona{1|2}.*``.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from mcsam.exceptions import ConfigurationError, NumericError, ShapeError


@dataclass
class EncoderConfig:
    image_size: int = 1024
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    neck_out_channels: int = 256
    tap_indices: tuple = (2, 5, 8, 11)
    variant: str = "plain"  # "plain": global attention; "sam": SAM block layout
    window_size: int = 14
    global_attn_indices: tuple = (2, 5, 8, 11)

    def __post_init__(self):
        self.tap_indices = tuple(self.tap_indices)
        self.global_attn_indices = tuple(self.global_attn_indices)
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if any(not 0 <= t < self.depth for t in self.tap_indices):
            raise ConfigurationError(
                f"tap_indices {self.tap_indices} must lie in [0, {self.depth})"
            )
        if self.variant not in ("plain", "sam"):
            raise ConfigurationError(f"unknown encoder variant {self.variant!r}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


def count_adapters(cfg: EncoderConfig) -> int:
    """Adapters inserted per the two-sites-per-block scheme."""
    return 2 * cfg.depth


@dataclass
class EncoderOutput:
    final_map: torch.Tensor  # (B, neck_out_channels, gh, gw)
    taps: list  # per tap index, (B, embed_dim, gh, gw)


class LayerNorm2d(nn.Module):
    """Channels-first layer norm over (B, C, H, W) maps."""

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class PatchEmbed(nn.Module):
    def __init__(self, patch_size, in_chans, embed_dim):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x).permute(0, 2, 3, 1)  # (B, gh, gw, C)


class MLPBlock(nn.Module):
    def __init__(self, dim, hidden_dim):
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden_dim)
        self.lin2 = nn.Linear(hidden_dim, dim)
        self.act = nn.GELU()

    def forward(self, x):
        return self.lin2(self.act(self.lin1(x)))


def window_partition(x, window_size):
    """Split (B, H, W, C) into non-overlapping windows, zero-padding the
    bottom/right edges to a window multiple."""
    B, H, W, C = x.shape
    pad_h = (window_size - H % window_size) % window_size
    pad_w = (window_size - W % window_size) % window_size
    if pad_h or pad_w:
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
    Hp, Wp = H + pad_h, W + pad_w
    x = x.view(B, Hp // window_size, window_size, Wp // window_size, window_size, C)
    windows = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window_size, window_size, C)
    return windows, (Hp, Wp)


def window_unpartition(windows, window_size, pad_hw, hw):
    Hp, Wp = pad_hw
    H, W = hw
    B = windows.shape[0] // (Hp * Wp // window_size // window_size)
    x = windows.view(B, Hp // window_size, Wp // window_size, window_size, window_size, -1)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, Hp, Wp, -1)
    return x[:, :H, :W, :].contiguous()


def get_rel_pos(q_size, k_size, rel_pos):
    """Slice (interpolating if necessary) relative positions for one axis."""
    max_rel_dist = int(2 * max(q_size, k_size) - 1)
    if rel_pos.shape[0] != max_rel_dist:
        rel_pos_resized = F.interpolate(
            rel_pos.reshape(1, rel_pos.shape[0], -1).permute(0, 2, 1),
            size=max_rel_dist,
            mode="linear",
        ).reshape(-1, max_rel_dist).permute(1, 0)
    else:
        rel_pos_resized = rel_pos
    q_coords = torch.arange(q_size)[:, None] * max(k_size / q_size, 1.0)
    k_coords = torch.arange(k_size)[None, :] * max(q_size / k_size, 1.0)
    relative_coords = (q_coords - k_coords) + (k_size - 1) * max(q_size / k_size, 1.0)
    return rel_pos_resized[relative_coords.long()]


def add_decomposed_rel_pos(attn, q, rel_pos_h, rel_pos_w, q_size, k_size):
    q_h, q_w = q_size
    k_h, k_w = k_size
    Rh = get_rel_pos(q_h, k_h, rel_pos_h)
    Rw = get_rel_pos(q_w, k_w, rel_pos_w)
    B, _, dim = q.shape
    r_q = q.reshape(B, q_h, q_w, dim)
    rel_h = torch.einsum("bhwc,hkc->bhwk", r_q, Rh)
    rel_w = torch.einsum("bhwc,wkc->bhwk", r_q, Rw)
    attn = (
        attn.view(B, q_h, q_w, k_h, k_w)
        + rel_h[:, :, :, :, None]
        + rel_w[:, :, :, None, :]
    ).view(B, q_h * q_w, k_h * k_w)
    return attn


class Attention(nn.Module):
    """Multi-head self-attention over (B, H, W, C) grids with optional
    decomposed relative positional embeddings."""

    def __init__(self, dim, num_heads, use_rel_pos=False, input_size=None):
        super().__init__()
        self.num_heads = num_heads
        head_dim = dim // num_heads
        self.scale = head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.use_rel_pos = use_rel_pos
        if use_rel_pos:
            if input_size is None:
                raise ConfigurationError("input_size required when use_rel_pos is set")
            self.rel_pos_h = nn.Parameter(torch.zeros(2 * input_size[0] - 1, head_dim))
            self.rel_pos_w = nn.Parameter(torch.zeros(2 * input_size[1] - 1, head_dim))

    def forward(self, x):
        B, H, W, _ = x.shape
        qkv = self.qkv(x).reshape(B, H * W, 3, self.num_heads, -1).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.reshape(3, B * self.num_heads, H * W, -1).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        if self.use_rel_pos:
            attn = add_decomposed_rel_pos(attn, q, self.rel_pos_h, self.rel_pos_w, (H, W), (H, W))
        attn = attn.softmax(dim=-1)
        x = (
            (attn @ v)
            .view(B, self.num_heads, H, W, -1)
            .permute(0, 2, 3, 1, 4)
            .reshape(B, H, W, -1)
        )
        return self.proj(x)


class TransformerBlock(nn.Module):
    """Pre-norm ViT block with two optional adapter insertion sites."""

    def __init__(self, dim, num_heads, mlp_ratio=4.0, window_size=0, use_rel_pos=False, input_size=None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        attn_size = (window_size, window_size) if window_size > 0 else input_size
        self.attn = Attention(dim, num_heads, use_rel_pos=use_rel_pos, input_size=attn_size)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio))
        self.window_size = window_size
        self._adapter_names = None

    def set_adapters(self, post_attn: nn.Module, post_mlp: nn.Module, names=("mona1", "mona2")):
        if self._adapter_names is not None:
            raise ConfigurationError("block already carries adapters")
        self.add_module(names[0], post_attn)
        self.add_module(names[1], post_mlp)
        self._adapter_names = tuple(names)

    @property
    def adapters(self):
        if self._adapter_names is None:
            return None, None
        return tuple(getattr(self, n) for n in self._adapter_names)

    def forward(self, x):
        post_attn, post_mlp = self.adapters
        shortcut = x
        x = self.norm1(x)
        if self.window_size > 0:
            H, W = x.shape[1], x.shape[2]
            x, pad_hw = window_partition(x, self.window_size)
        x = self.attn(x)
        if self.window_size > 0:
            x = window_unpartition(x, self.window_size, pad_hw, (H, W))
        x = shortcut + x
        if post_attn is not None:
            x = x + post_attn(x)
        x = x + self.mlp(self.norm2(x))
        if post_mlp is not None:
            x = x + post_mlp(x)
        return x


class ImageEncoder(nn.Module):
    """SAM-style ViT emitting the projected final map and intermediate taps."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.grid_size
        self.patch_embed = PatchEmbed(cfg.patch_size, 3, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, g, g, cfg.embed_dim))
        if cfg.variant == "plain":  # sam variant loads trained values over zeros
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
        use_rel_pos = cfg.variant == "sam"
        for i in range(cfg.depth):
            window = 0
            if cfg.variant == "sam" and i not in cfg.global_attn_indices:
                window = cfg.window_size
            self.add_module(
                f"block{i}",
                TransformerBlock(
                    cfg.embed_dim,
                    cfg.num_heads,
                    mlp_ratio=cfg.mlp_ratio,
                    window_size=window,
                    use_rel_pos=use_rel_pos,
                    input_size=(g, g),
                ),
            )
        self.neck = nn.Sequential(
            nn.Conv2d(cfg.embed_dim, cfg.neck_out_channels, kernel_size=1, bias=False),
            LayerNorm2d(cfg.neck_out_channels),
            nn.Conv2d(cfg.neck_out_channels, cfg.neck_out_channels, kernel_size=3, padding=1, bias=False),
            LayerNorm2d(cfg.neck_out_channels),
        )

    @property
    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(self.cfg.depth)]

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """Embed (B, 3, S, S) images into a (B, g, g, C) token grid with
        positional embeddings added. No implicit resize."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] != self.cfg.image_size or images.shape[3] != self.cfg.image_size:
            raise ShapeError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} input, "
                f"got {images.shape[2]}x{images.shape[3]}"
            )
        return self.patch_embed(images) + self.pos_embed

    def forward(self, images: torch.Tensor) -> EncoderOutput:
        x = self.patchify(images)
        tap_set = set(self.cfg.tap_indices)
        taps = {}
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after encoder block {i}")
            if i in tap_set:
                taps[i] = x.permute(0, 3, 1, 2)
        final = self.neck(x.permute(0, 3, 1, 2))
        return EncoderOutput(final, [taps[i] for i in self.cfg.tap_indices])


def add_block_adapters(encoder: ImageEncoder, factory, names=("mona1", "mona2")):
    """Insert one adapter pair per block; `factory` builds a fresh module."""
    for blk in encoder.blocks:
        blk.set_adapters(factory(), factory(), names=names)

"""Pretrained-weight import for the image encoder.

Three sources are supported: the published SAM ViT-B checkpoint (imported
through an explicit name-map table shipped as package data), generic
timm-style ViT classification weights, and random initialization.
"""

import json
import logging
from importlib import resources

import torch
import torch.nn.functional as F

from mcsam.encoder import ImageEncoder
from mcsam.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

SAM_PIXEL_MEAN = (123.675, 116.28, 103.53)
SAM_PIXEL_STD = (58.395, 57.12, 57.375)


def sam_name_map() -> dict:
    """Published SAM checkpoint name -> encoder-local parameter name."""
    with resources.files("mcsam.resources").joinpath("sam_vit_b_name_map.json").open() as fh:
        return json.load(fh)


def _load_state(source):
    if isinstance(source, dict):
        return source
    return torch.load(source, map_location="cpu", weights_only=True)


def _resize_positional(name, tensor, target_shape):
    """Interpolate positional tables when the token grid differs from the
    checkpoint's training grid; other mismatches are not resizable."""
    if name.endswith("pos_embed") and tensor.dim() == 4:
        grid = F.interpolate(
            tensor.permute(0, 3, 1, 2),
            size=tuple(target_shape[1:3]),
            mode="bilinear",
            align_corners=False,
        ).permute(0, 2, 3, 1)
        return grid if tuple(grid.shape) == tuple(target_shape) else None
    if ("rel_pos_h" in name or "rel_pos_w" in name) and tensor.dim() == 2:
        resized = (
            F.interpolate(
                tensor.t()[None], size=int(target_shape[0]), mode="linear", align_corners=False
            )[0].t()
        )
        return resized if tuple(resized.shape) == tuple(target_shape) else None
    return None


def load_sam_weights(encoder: ImageEncoder, source) -> dict:
    """Import a SAM checkpoint (full model or encoder-only) by name mapping.

    Returns {"loaded": [...], "missing": [...]} where `missing` lists our
    parameters the checkpoint did not provide. Keys outside the image
    encoder (prompt/mask decoder) are ignored; those parts are discarded
    by this architecture.
    """
    state = _load_state(source)
    name_map = sam_name_map()
    own = encoder.state_dict()
    mapped = {}
    for src_name, dst_name in name_map.items():
        if src_name not in state:
            continue
        if dst_name not in own:
            raise ConfigurationError(
                f"name map points at unknown parameter {dst_name!r}; "
                "encoder structure does not match the map (need variant='sam', depth=12)"
            )
        tensor = state[src_name]
        if tuple(tensor.shape) != tuple(own[dst_name].shape):
            tensor = _resize_positional(src_name, tensor, own[dst_name].shape)
            if tensor is None:
                raise ConfigurationError(
                    f"shape mismatch importing {src_name} -> {dst_name}: "
                    f"{tuple(state[src_name].shape)} vs {tuple(own[dst_name].shape)}"
                )
        mapped[dst_name] = tensor
    if not mapped:
        raise ConfigurationError("checkpoint contains no mappable image-encoder weights")
    encoder.load_state_dict(mapped, strict=False)
    missing = sorted(set(own) - set(mapped))
    return {"loaded": sorted(mapped), "missing": missing}


def load_vit_weights(encoder: ImageEncoder, source) -> dict:
    """Import timm-style ViT classification weights (cls token dropped,
    positional grid resized bilinearly if it differs)."""
    state = _load_state(source)
    own = encoder.state_dict()
    mapped = {}

    def put(dst, tensor):
        if dst not in own:
            return
        if tuple(tensor.shape) != tuple(own[dst].shape):
            raise ConfigurationError(
                f"shape mismatch importing ViT weight {dst}: "
                f"{tuple(tensor.shape)} vs {tuple(own[dst].shape)}"
            )
        mapped[dst] = tensor

    for leaf in ("weight", "bias"):
        if f"patch_embed.proj.{leaf}" in state:
            put(f"patch_embed.proj.{leaf}", state[f"patch_embed.proj.{leaf}"])
    if "pos_embed" in state:
        pos = state["pos_embed"]
        n_extra = pos.shape[1] - int((pos.shape[1]) ** 0.5) ** 2
        if n_extra > 0:  # class / distillation tokens
            pos = pos[:, n_extra:]
        side = int(pos.shape[1] ** 0.5)
        grid = pos.reshape(1, side, side, -1)
        g = encoder.cfg.grid_size
        if side != g:
            grid = F.interpolate(
                grid.permute(0, 3, 1, 2), size=(g, g), mode="bilinear", align_corners=False
            ).permute(0, 2, 3, 1)
        put("pos_embed", grid)
    renames = {"mlp.fc1": "mlp.lin1", "mlp.fc2": "mlp.lin2"}
    for i in range(encoder.cfg.depth):
        for src_mid, dst_mid in (
            ("norm1", "norm1"),
            ("attn.qkv", "attn.qkv"),
            ("attn.proj", "attn.proj"),
            ("norm2", "norm2"),
            ("mlp.fc1", renames["mlp.fc1"]),
            ("mlp.fc2", renames["mlp.fc2"]),
            ("mlp.lin1", "mlp.lin1"),
            ("mlp.lin2", "mlp.lin2"),
        ):
            for leaf in ("weight", "bias"):
                key = f"blocks.{i}.{src_mid}.{leaf}"
                if key in state:
                    put(f"block{i}.{src_mid if src_mid == dst_mid else dst_mid}.{leaf}", state[key])
    if not mapped:
        raise ConfigurationError("checkpoint contains no mappable ViT weights")
    encoder.load_state_dict(mapped, strict=False)
    missing = sorted(set(own) - set(mapped))
    return {"loaded": sorted(mapped), "missing": missing}


def load_pretrained(encoder: ImageEncoder, source: str, path, allow_missing_file=False):
    """Dispatch on weight source: 'sam', 'vit', or 'none'.

    With `allow_missing_file` (dry runs), a missing weights file logs a
    warning and leaves the encoder randomly initialized instead of failing.
    """
    if source == "none":
        return {"loaded": [], "missing": sorted(encoder.state_dict())}
    if path is None:
        raise ConfigurationError(f"weight source {source!r} requires a checkpoint path")
    import os

    if not os.path.exists(path) and not os.path.isabs(path):
        cache = os.environ.get("MCSAM_CACHE_DIR")
        if cache and os.path.exists(os.path.join(cache, path)):
            path = os.path.join(cache, path)
    if not os.path.exists(path):
        if allow_missing_file:
            logger.warning(
                "weights file %s not found; continuing with random initialization", path
            )
            return {"loaded": [], "missing": sorted(encoder.state_dict())}
        raise ConfigurationError(f"weights file not found: {path}")
    if source == "sam":
        return load_sam_weights(encoder, path)
    if source == "vit":
        return load_vit_weights(encoder, path)
    raise ConfigurationError(f"unknown weight source {source!r}")

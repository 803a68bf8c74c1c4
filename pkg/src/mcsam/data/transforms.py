"""Preprocessing: resize to the model's square input, flip augmentation,
channel replication for grayscale (SAR) imagery, and normalization."""

from dataclasses import dataclass

import cv2
import numpy as np
import torch


@dataclass
class PreprocessConfig:
    image_size: int = 1024
    mean: tuple = (123.675, 116.28, 103.53)
    std: tuple = (58.395, 57.12, 57.375)
    hflip_prob: float = 0.5


def hflip(sample: dict) -> dict:
    """Horizontal flip of image, masks and boxes; an exact involution."""
    image = sample["image"][:, ::-1].copy()
    masks = sample["masks"][:, :, ::-1].copy()
    width = image.shape[1]
    boxes = sample["boxes"].copy()
    if len(boxes):
        boxes[:, 0] = width - boxes[:, 0] - boxes[:, 2]
    out = dict(sample)
    out.update(image=image, masks=masks, boxes=boxes)
    return out


def resize_long_side(sample: dict, target: int) -> dict:
    """Scale so the long side equals `target`; masks use nearest lookup."""
    image = sample["image"]
    h, w = image.shape[:2]
    scale = target / max(h, w)
    nh, nw = round(h * scale), round(w * scale)
    image = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    masks = sample["masks"]
    if masks.shape[0]:
        masks = np.stack(
            [
                cv2.resize(m.astype(np.uint8), (nw, nh), interpolation=cv2.INTER_NEAREST).astype(bool)
                for m in masks
            ]
        )
    else:
        masks = np.zeros((0, nh, nw), dtype=bool)
    out = dict(sample)
    out.update(image=image, masks=masks, boxes=sample["boxes"] * scale, scale=scale)
    return out


def preprocess(sample: dict, cfg: PreprocessConfig, train_mode=False, rng=None, counters=None):
    """Model-ready sample: (3, S, S) normalized image, masks and labels.

    Grayscale input is replicated to three channels. The image is resized
    long-side to `cfg.image_size`, optionally flipped (p = hflip_prob, one
    coin per sample from `rng`), normalized, and zero-padded to square with
    the valid region recorded. Instances whose mask loses all foreground in
    the resize are dropped (counted in `counters['dropped_instances']`).
    """
    image = sample["image"]
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    work = dict(sample)
    work["image"] = image
    work = resize_long_side(work, cfg.image_size)
    if train_mode and rng is not None and rng.random() < cfg.hflip_prob:
        work = hflip(work)

    keep = work["masks"].any(axis=(1, 2)) if work["masks"].shape[0] else np.zeros(0, dtype=bool)
    dropped = int(work["masks"].shape[0] - keep.sum())
    if dropped and counters is not None:
        counters["dropped_instances"] = counters.get("dropped_instances", 0) + dropped
    masks = work["masks"][keep]
    labels = work["labels"][keep]
    boxes = work["boxes"][keep]

    img = work["image"].astype(np.float32)
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    img = (img - mean) / std

    size = cfg.image_size
    nh, nw = img.shape[:2]
    padded = np.zeros((size, size, 3), dtype=np.float32)
    padded[:nh, :nw] = img
    padded_masks = np.zeros((masks.shape[0], size, size), dtype=bool)
    padded_masks[:, :nh, :nw] = masks

    return {
        "image": torch.from_numpy(padded).permute(2, 0, 1),
        "masks": torch.from_numpy(padded_masks),
        "labels": torch.from_numpy(labels),
        "boxes": torch.from_numpy(boxes),
        "valid_hw": (nh, nw),
        "scale": work["scale"],
        "image_id": sample["image_id"],
        "file_name": sample.get("file_name"),
    }

"""COCO-instances ingestion with polygon and RLE mask decoding.

Annotation files use the standard field names (`images`, `annotations`,
`categories`, `segmentation`, `iscrowd`). Polygons are rasterized with an
even-odd scanline rule over pixel centers; masks and boxes are regenerated
from the rasterization so that every instance satisfies the box-encloses-
mask invariant regardless of annotation sloppiness.
"""

import json
import logging
import os
from dataclasses import dataclass

import cv2
import numpy as np

from mcsam.exceptions import ConfigurationError
from mcsam.rle import decode_rle
from mcsam.evaluation import mask_to_box

logger = logging.getLogger(__name__)


def rasterize_polygon(coords, height, width) -> np.ndarray:
    """Fill one flat [x0, y0, x1, y1, ...] polygon: a pixel is foreground
    iff its center lies inside under the even-odd rule."""
    xs = np.asarray(coords[0::2], dtype=np.float64)
    ys = np.asarray(coords[1::2], dtype=np.float64)
    n = len(xs)
    mask = np.zeros((height, width), dtype=bool)
    for r in range(height):
        yc = r + 0.5
        crossings = []
        for i in range(n):
            y0, y1 = ys[i], ys[(i + 1) % n]
            if (y0 <= yc < y1) or (y1 <= yc < y0):
                x0, x1 = xs[i], xs[(i + 1) % n]
                crossings.append(x0 + (yc - y0) / (y1 - y0) * (x1 - x0))
        crossings.sort()
        for j in range(0, len(crossings) - 1, 2):
            c0 = int(np.ceil(crossings[j] - 0.5))
            c1 = int(np.floor(crossings[j + 1] - 0.5))
            if c1 >= 0 and c0 < width:
                mask[r, max(c0, 0) : min(c1, width - 1) + 1] = True
    return mask


def decode_segmentation(segmentation, height, width, counters=None) -> np.ndarray:
    """Union of polygon parts, or an RLE dict, into one binary mask."""
    if isinstance(segmentation, dict):
        return decode_rle(segmentation)
    mask = np.zeros((height, width), dtype=bool)
    for part in segmentation:
        if len(part) < 6:
            if counters is not None:
                counters["skipped_polygons"] += 1
            logger.warning("skipping malformed polygon with %d coordinates", len(part))
            continue
        mask |= rasterize_polygon(part, height, width)
    return mask


@dataclass
class CocoInstance:
    category_id: int  # original id from the annotation file
    label: int  # contiguous zero-based class index
    mask: np.ndarray
    bbox: tuple


@dataclass
class CocoSample:
    image_id: int
    file_name: str
    height: int
    width: int
    instances: list


class CocoDataset:
    """One dataset split; samples are ordered by image id."""

    def __init__(self, annotation_file, image_root, name="train"):
        self.name = name
        self.image_root = image_root
        self.counters = {"skipped_polygons": 0, "empty_instances": 0}
        with open(annotation_file) as fh:
            coco = json.load(fh)
        self.categories = sorted(coco["categories"], key=lambda c: c["id"])
        self.cat_to_label = {c["id"]: i for i, c in enumerate(self.categories)}
        self.label_to_cat = {i: c["id"] for i, c in enumerate(self.categories)}
        anns_by_image = {}
        for ann in coco["annotations"]:
            anns_by_image.setdefault(ann["image_id"], []).append(ann)
        self.samples = []
        for info in sorted(coco["images"], key=lambda im: im["id"]):
            path = os.path.join(image_root, info["file_name"])
            if not os.path.exists(path):
                raise ConfigurationError(
                    f"image file missing for image id {info['id']}: {path}"
                )
            instances = []
            for ann in anns_by_image.get(info["id"], []):
                mask = decode_segmentation(
                    ann["segmentation"], info["height"], info["width"], self.counters
                )
                if not mask.any():
                    self.counters["empty_instances"] += 1
                    logger.warning(
                        "annotation %s rasterized to an empty mask; dropped", ann.get("id")
                    )
                    continue
                if ann["category_id"] not in self.cat_to_label:
                    raise ConfigurationError(
                        f"annotation references unknown category {ann['category_id']}"
                    )
                instances.append(
                    CocoInstance(
                        category_id=ann["category_id"],
                        label=self.cat_to_label[ann["category_id"]],
                        mask=mask,
                        bbox=mask_to_box(mask),
                    )
                )
            self.samples.append(
                CocoSample(
                    image_id=info["id"],
                    file_name=info["file_name"],
                    height=info["height"],
                    width=info["width"],
                    instances=instances,
                )
            )

    @property
    def num_classes(self):
        return len(self.categories)

    def __len__(self):
        return len(self.samples)

    def load_image(self, sample: CocoSample) -> np.ndarray:
        """Pixels as (H, W) grayscale or (H, W, 3) RGB uint8."""
        path = os.path.join(self.image_root, sample.file_name)
        img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
        if img is None:
            raise ConfigurationError(f"unreadable image for id {sample.image_id}: {path}")
        if img.ndim == 3 and img.shape[2] == 4:
            img = img[:, :, :3]
        if img.ndim == 3:
            img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
        return img

    def __getitem__(self, idx) -> dict:
        sample = self.samples[idx]
        masks = (
            np.stack([inst.mask for inst in sample.instances])
            if sample.instances
            else np.zeros((0, sample.height, sample.width), dtype=bool)
        )
        return {
            "image": self.load_image(sample),
            "masks": masks,
            "labels": np.array([inst.label for inst in sample.instances], dtype=np.int64),
            "boxes": np.array(
                [inst.bbox for inst in sample.instances], dtype=np.float64
            ).reshape(-1, 4),
            "image_id": sample.image_id,
            "file_name": sample.file_name,
        }


def load_coco(annotation_file, image_root, name="train") -> CocoDataset:
    return CocoDataset(annotation_file, image_root, name=name)

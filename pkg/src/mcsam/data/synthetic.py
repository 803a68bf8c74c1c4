"""Synthetic rectangle dataset for desk-scale runs and the overfit check."""

import json
import os

import cv2
import numpy as np


def make_rectangle_dataset(root, num_images=4, image_size=256, seed=0, rects_per_image=1):
    """Write a COCO-format dataset of bright rectangles on a dark noisy
    background. Returns (annotation_path, image_dir)."""
    rng = np.random.default_rng(seed)
    image_dir = os.path.join(root, "images")
    os.makedirs(image_dir, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for image_id in range(1, num_images + 1):
        img = rng.integers(0, 40, size=(image_size, image_size), dtype=np.int64).astype(np.uint8)
        img = np.repeat(img[:, :, None], 3, axis=2)
        for _ in range(rects_per_image):
            w = int(rng.integers(image_size // 4, image_size // 2))
            h = int(rng.integers(image_size // 4, image_size // 2))
            x0 = int(rng.integers(8, image_size - w - 8))
            y0 = int(rng.integers(8, image_size - h - 8))
            x1, y1 = x0 + w, y0 + h
            color = rng.integers(170, 255, size=3)
            img[y0:y1, x0:x1] = color
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": 1,
                    "segmentation": [[x0, y0, x1, y0, x1, y1, x0, y1]],
                    "bbox": [x0, y0, w, h],
                    "area": w * h,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
        file_name = f"img_{image_id:03d}.png"
        cv2.imwrite(os.path.join(image_dir, file_name), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        images.append(
            {"id": image_id, "file_name": file_name, "height": image_size, "width": image_size}
        )
    ann = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": "box"}],
    }
    ann_path = os.path.join(root, "annotations.json")
    with open(ann_path, "w") as fh:
        json.dump(ann, fh)
    return ann_path, image_dir

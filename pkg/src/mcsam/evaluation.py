"""COCO-protocol average precision for masks and mask-derived boxes.

AP is the 101-point interpolated precision-recall integral, computed per
category with greedy score-ordered matching at each IoU threshold and
averaged over thresholds 0.50:0.05:0.95 and over categories with ground
truth. Boxes are tight bounding boxes of the masks; the model has no box
head.
"""

from dataclasses import dataclass

import numpy as np

from mcsam.exceptions import ShapeError

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks on the same raster."""
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def box_iou(a, b) -> float:
    """IoU of two (x, y, w, h) boxes."""
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax0 + aw, bx0 + bw), min(ay0 + ah, by0 + bh)
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def mask_to_box(mask: np.ndarray):
    """Tight (x, y, w, h) bounding box of a mask's foreground; None if empty."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return (float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1))


@dataclass
class Detection:
    image_id: int
    category_id: int
    score: float
    mask: np.ndarray
    box: tuple = None

    def __post_init__(self):
        if self.box is None:
            self.box = mask_to_box(self.mask) or (0.0, 0.0, 0.0, 0.0)


@dataclass
class GroundTruth:
    image_id: int
    category_id: int
    mask: np.ndarray
    box: tuple = None

    def __post_init__(self):
        if self.box is None:
            self.box = mask_to_box(self.mask) or (0.0, 0.0, 0.0, 0.0)


@dataclass
class EvalReport:
    ap_mask: float
    ap_mask_50: float
    ap_mask_75: float
    ap_box: float
    ap_box_50: float
    ap_box_75: float

    def as_dict(self):
        return dict(self.__dict__)

    def to_kv_text(self) -> str:
        return "".join(f"{k}={v:.4f}\n" for k, v in self.as_dict().items())

    def to_table(self) -> str:
        head = f"{'metric':<12}{'AP':>8}{'AP50':>8}{'AP75':>8}"
        mask = f"{'mask':<12}{self.ap_mask:>8.1f}{self.ap_mask_50:>8.1f}{self.ap_mask_75:>8.1f}"
        box = f"{'box':<12}{self.ap_box:>8.1f}{self.ap_box_50:>8.1f}{self.ap_box_75:>8.1f}"
        return "\n".join([head, mask, box])


def _iou_fn(kind):
    if kind == "mask":
        return lambda d, g: mask_iou(d.mask, g.mask)
    if kind == "box":
        return lambda d, g: box_iou(d.box, g.box)
    raise ValueError(f"unknown AP kind {kind!r}")


def _cap_per_image(dets, max_dets):
    if max_dets is None:
        return dets
    by_image = {}
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d)
    kept = []
    for image_dets in by_image.values():
        image_dets.sort(key=lambda d: -d.score)
        kept.extend(image_dets[:max_dets])
    return kept


def _category_ap(dets, gts, thresholds, iou, n_gt):
    """Per-threshold AP for one category across all images."""
    dets = sorted(dets, key=lambda d: -d.score)
    gts_by_image = {}
    for g in gts:
        gts_by_image.setdefault(g.image_id, []).append(g)
    ious = [
        [iou(d, g) for g in gts_by_image.get(d.image_id, [])]
        for d in dets
    ]
    aps = {}
    for t in thresholds:
        matched = {img: [False] * len(v) for img, v in gts_by_image.items()}
        tp = np.zeros(len(dets))
        for di, d in enumerate(dets):
            cand = gts_by_image.get(d.image_id, [])
            best, best_iou = -1, t
            for gi in range(len(cand)):
                if matched[d.image_id][gi]:
                    continue
                if ious[di][gi] >= best_iou:
                    best, best_iou = gi, ious[di][gi]
            if best >= 0:
                matched[d.image_id][best] = True
                tp[di] = 1
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(1 - tp)
        recall = tp_cum / n_gt
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        for i in range(len(precision) - 1, 0, -1):
            precision[i - 1] = max(precision[i - 1], precision[i])
        idx = np.searchsorted(recall, RECALL_POINTS, side="left")
        interp = np.array([precision[i] if i < len(precision) else 0.0 for i in idx])
        aps[t] = float(interp.mean())
    return aps


def compute_ap(detections, ground_truths, iou_thresholds=IOU_THRESHOLDS, kind="mask", max_dets=100):
    """AP percentages averaged over thresholds and categories.

    Returns {"ap": float, "per_threshold": {t: float}}; categories with no
    ground truth are excluded from the means. With no ground truth at all,
    every value is 0.
    """
    iou = _iou_fn(kind)
    detections = _cap_per_image(list(detections), max_dets)
    categories = sorted({g.category_id for g in ground_truths})
    if not categories:
        return {"ap": 0.0, "per_threshold": {t: 0.0 for t in iou_thresholds}}
    per_threshold = {t: [] for t in iou_thresholds}
    for cat in categories:
        cat_gts = [g for g in ground_truths if g.category_id == cat]
        cat_dets = [d for d in detections if d.category_id == cat]
        aps = _category_ap(cat_dets, cat_gts, iou_thresholds, iou, len(cat_gts))
        for t in iou_thresholds:
            per_threshold[t].append(aps[t])
    per_threshold = {t: 100.0 * float(np.mean(v)) for t, v in per_threshold.items()}
    return {
        "ap": float(np.mean(list(per_threshold.values()))),
        "per_threshold": per_threshold,
    }


def evaluate_detections(detections, ground_truths, max_dets=100) -> EvalReport:
    """Full report over both mask and mask-derived-box IoUs."""
    mask = compute_ap(detections, ground_truths, kind="mask", max_dets=max_dets)
    box = compute_ap(detections, ground_truths, kind="box", max_dets=max_dets)
    return EvalReport(
        ap_mask=mask["ap"],
        ap_mask_50=mask["per_threshold"][0.5],
        ap_mask_75=mask["per_threshold"][0.75],
        ap_box=box["ap"],
        ap_box_50=box["per_threshold"][0.5],
        ap_box_75=box["per_threshold"][0.75],
    )

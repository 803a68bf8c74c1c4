"""Training losses: class cross-entropy plus point-sampled mask losses.

Mask terms are evaluated at n point coordinates drawn uniformly in the
mask plane; the same coordinates index the prediction and the ground truth
through bilinear lookup, and the cross-entropy and dice terms share one
draw per matched image.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from mcsam.exceptions import ConfigurationError


@dataclass
class LossConfig:
    lambda_cls: float = 2.0
    lambda_ce_seg: float = 5.0
    lambda_dice: float = 5.0
    num_points: int = 12544
    dice_eps: float = 1.0
    no_object_weight: float = 0.1

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_ce_seg, self.lambda_dice) < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.num_points < 1:
            raise ConfigurationError("num_points must be >= 1")
        if self.dice_eps <= 0:
            raise ConfigurationError("dice_eps must be positive")


def sample_point_coords(n, device=None, dtype=torch.float32, generator=None):
    """n uniform (x, y) coordinates in [0, 1]^2."""
    return torch.rand(n, 2, device=device, dtype=dtype, generator=generator)


def point_sample(masks: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of (Q, H, W) maps at (n, 2) normalized (x, y)
    coordinates; returns (Q, n)."""
    q = masks.shape[0]
    if q == 0:
        return masks.new_zeros((0, coords.shape[0]))
    grid = (2 * coords - 1).view(1, 1, -1, 2).expand(q, -1, -1, -1)
    sampled = F.grid_sample(
        masks[:, None], grid, mode="bilinear", padding_mode="border", align_corners=False
    )
    return sampled[:, 0, 0, :]


def loss_ce_cls(class_logits: torch.Tensor, target_classes: torch.Tensor, cfg: LossConfig):
    """Cross-entropy over all queries; the no-object class (last index) is
    down-weighted by `no_object_weight`. Uses the weighted-mean convention:
    sum(w_i * ce_i) / sum(w_i)."""
    num_slots = class_logits.shape[-1]
    weight = torch.ones(num_slots, device=class_logits.device, dtype=class_logits.dtype)
    weight[-1] = cfg.no_object_weight
    return F.cross_entropy(class_logits, target_classes, weight=weight)


def loss_ce_seg(pred_points: torch.Tensor, gt_points: torch.Tensor):
    """Binary cross-entropy on sigmoid logits over shared sampled points."""
    if pred_points.numel() == 0:
        return pred_points.sum()
    return F.binary_cross_entropy_with_logits(pred_points, gt_points)


def loss_dice(pred_points: torch.Tensor, gt_points: torch.Tensor, eps: float):
    """Dice loss on sigmoid probabilities over shared sampled points,
    averaged over matched pairs."""
    if pred_points.numel() == 0:
        return pred_points.sum()
    probs = pred_points.sigmoid()
    numerator = 2 * (probs * gt_points).sum(-1)
    denominator = probs.sum(-1) + gt_points.sum(-1)
    return (1 - (numerator + eps) / (denominator + eps)).mean()


def build_class_targets(num_queries, num_classes, match, gt_labels, device):
    """Per-query class-index targets; unmatched queries get the no-object
    slot (index == num_classes)."""
    targets = torch.full((num_queries,), num_classes, dtype=torch.long, device=device)
    for q, g in match.pairs:
        targets[q] = gt_labels[g]
    return targets


def matched_point_pairs(mask_logits, gt_masks, match, cfg, generator=None):
    """Sample one shared coordinate set and gather (pred, gt) point values
    for every matched pair: two (P, n) tensors."""
    if not match.pairs:
        empty = mask_logits.new_zeros((0, cfg.num_points))
        return empty, empty
    coords = sample_point_coords(
        cfg.num_points, device=mask_logits.device, dtype=mask_logits.dtype, generator=generator
    )
    q_idx = [q for q, _ in match.pairs]
    g_idx = [g for _, g in match.pairs]
    pred_points = point_sample(mask_logits[q_idx], coords)
    gt_points = point_sample(gt_masks[g_idx].to(mask_logits.dtype), coords)
    return pred_points, gt_points


def image_loss(class_logits, mask_logits, gt_masks, gt_labels, cfg, generator=None):
    """Unweighted loss components for one image given matched predictions."""
    from mcsam.matching import hungarian_match

    match = hungarian_match(class_logits, mask_logits, gt_masks, gt_labels, cfg)
    targets = build_class_targets(
        class_logits.shape[0], class_logits.shape[1] - 1, match, gt_labels, class_logits.device
    )
    ce_cls = loss_ce_cls(class_logits, targets, cfg)
    pred_points, gt_points = matched_point_pairs(mask_logits, gt_masks, match, cfg, generator)
    return {
        "ce_cls": ce_cls,
        "ce_seg": loss_ce_seg(pred_points, gt_points),
        "dice": loss_dice(pred_points, gt_points, cfg.dice_eps),
    }


def total_loss(pred, targets, cfg: LossConfig, generator=None):
    """Weighted loss over the final prediction and every auxiliary output.

    pred: InstancePrediction (batched); targets: per-image dicts with
    boolean `masks` (G, H, W) and zero-based `labels` (G,).
    Returns (total, components) where components hold the unweighted sums
    over layers, batch-averaged.
    """
    layer_preds = pred.aux_outputs if pred.aux_outputs else [pred]
    device = pred.class_logits.device
    components = {k: torch.zeros((), device=device) for k in ("ce_cls", "ce_seg", "dice")}
    batch = pred.class_logits.shape[0]
    for lp in layer_preds:
        for b in range(batch):
            img = image_loss(
                lp.class_logits[b],
                lp.mask_logits[b],
                targets[b]["masks"],
                targets[b]["labels"],
                cfg,
                generator,
            )
            for k in components:
                components[k] = components[k] + img[k] / batch
    total = (
        cfg.lambda_cls * components["ce_cls"]
        + cfg.lambda_ce_seg * components["ce_seg"]
        + cfg.lambda_dice * components["dice"]
    )
    return total, components

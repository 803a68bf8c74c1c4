"""Hungarian assignment between query predictions and ground-truth instances.

The cost of pairing a query with an instance combines the negative
log-probability of the instance's class with point-sampled mask
cross-entropy and dice terms, using the same weights as the training loss.
The optimal one-to-one assignment is solved with scipy's LAP solver.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from mcsam.exceptions import ConfigurationError
from mcsam.losses import LossConfig, point_sample, sample_point_coords

_LOG_FLOOR = 1e-12


@dataclass
class MatchResult:
    pairs: list  # (query index, gt index), injective on both sides
    unmatched_queries: list  # queries assigned to "no object"


def pairwise_point_ce(pred_points: torch.Tensor, gt_points: torch.Tensor) -> torch.Tensor:
    """(Q, n) logits x (G, n) targets -> (Q, G) mean binary cross-entropy."""
    pos = F.binary_cross_entropy_with_logits(
        pred_points, torch.ones_like(pred_points), reduction="none"
    )
    neg = F.binary_cross_entropy_with_logits(
        pred_points, torch.zeros_like(pred_points), reduction="none"
    )
    n = pred_points.shape[1]
    return (torch.einsum("qn,gn->qg", pos, gt_points) + torch.einsum("qn,gn->qg", neg, 1 - gt_points)) / n


def pairwise_dice_loss(pred_points: torch.Tensor, gt_points: torch.Tensor, eps: float) -> torch.Tensor:
    """(Q, n) logits x (G, n) targets -> (Q, G) dice loss on sigmoid probs."""
    probs = pred_points.sigmoid()
    numerator = 2 * torch.einsum("qn,gn->qg", probs, gt_points)
    denominator = probs.sum(-1)[:, None] + gt_points.sum(-1)[None, :]
    return 1 - (numerator + eps) / (denominator + eps)


@torch.no_grad()
def match_cost_matrix(class_logits, mask_logits, gt_masks, gt_labels, cfg: LossConfig, coords=None):
    """(Q, G) assignment cost; `coords` shares the sampled points."""
    if coords is None:
        coords = sample_point_coords(cfg.num_points, device=mask_logits.device, dtype=mask_logits.dtype)
    probs = class_logits.softmax(-1)
    cost_cls = -probs[:, gt_labels].clamp_min(_LOG_FLOOR).log()
    pred_points = point_sample(mask_logits, coords)
    gt_points = point_sample(gt_masks.to(mask_logits.dtype), coords)
    cost_ce = pairwise_point_ce(pred_points, gt_points)
    cost_dice = pairwise_dice_loss(pred_points, gt_points, cfg.dice_eps)
    return cfg.lambda_cls * cost_cls + cfg.lambda_ce_seg * cost_ce + cfg.lambda_dice * cost_dice


def assign(cost: torch.Tensor) -> MatchResult:
    """Minimum-cost injective assignment for a (Q, G) cost matrix."""
    rows, cols = linear_sum_assignment(cost.cpu().numpy())
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {q for q, _ in pairs}
    unmatched = [q for q in range(cost.shape[0]) if q not in matched]
    return MatchResult(pairs=pairs, unmatched_queries=unmatched)


def hungarian_match(class_logits, mask_logits, gt_masks, gt_labels, cfg: LossConfig, coords=None) -> MatchResult:
    """Optimal query-to-instance assignment for one image.

    class_logits: (Q, M+1); mask_logits: (Q, h, w); gt_masks: (G, H, W);
    gt_labels: (G,) zero-based class indices.
    """
    num_queries = class_logits.shape[0]
    num_gt = gt_masks.shape[0]
    if num_gt > num_queries:
        raise ConfigurationError(
            f"{num_gt} ground-truth instances exceed {num_queries} queries; "
            "increase num_queries"
        )
    if num_gt == 0:
        return MatchResult(pairs=[], unmatched_queries=list(range(num_queries)))
    cost = match_cost_matrix(class_logits, mask_logits, gt_masks, gt_labels, cfg, coords)
    return assign(cost)

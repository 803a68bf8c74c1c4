import numpy as np
import pytest
import torch

from mcsam.exceptions import ConfigurationError
from mcsam.losses import LossConfig, point_sample, sample_point_coords
from mcsam.matching import assign, hungarian_match, match_cost_matrix
from oracles import brute_force_assignment


def small_cfg(n=32):
    return LossConfig(num_points=n)


class TestAssignment:
    def test_perfect_single_match(self):
        cfg = small_cfg()
        class_logits = torch.tensor([[8.0, -8.0]])  # class 0 confidently
        mask_logits = torch.full((1, 4, 4), 8.0)
        gt = torch.ones(1, 8, 8, dtype=torch.bool)
        labels = torch.tensor([0])
        result = hungarian_match(class_logits, mask_logits, gt, labels, cfg)
        assert result.pairs == [(0, 0)]
        assert result.unmatched_queries == []

    def test_dominant_cost_matrix_equals_greedy(self):
        cost = torch.tensor([[0.1, 5.0, 5.0], [5.0, 0.2, 5.0], [5.0, 5.0, 0.3], [9.0, 9.0, 9.0]])
        result = assign(cost)
        assert result.pairs == [(0, 0), (1, 1), (2, 2)]
        assert result.unmatched_queries == [3]

    @pytest.mark.parametrize("trial", range(25))
    def test_random_5x5_matches_brute_force(self, trial):
        rng = np.random.default_rng(trial)
        cost = torch.tensor(rng.random((5, 5)))
        result = assign(cost)
        best_cost, best_pairs = brute_force_assignment(cost.numpy())
        total = sum(cost[q, g].item() for q, g in result.pairs)
        assert total == pytest.approx(best_cost, abs=1e-12)

    def test_rectangular_cases_match_brute_force(self):
        rng = np.random.default_rng(99)
        for n_q, n_g in [(3, 1), (4, 2), (6, 5), (6, 6)]:
            cost = torch.tensor(rng.random((n_q, n_g)))
            result = assign(cost)
            best_cost, _ = brute_force_assignment(cost.numpy())
            total = sum(cost[q, g].item() for q, g in result.pairs)
            assert total == pytest.approx(best_cost, abs=1e-12)
            assert len(result.pairs) == min(n_q, n_g)

    def test_more_gt_than_queries_is_error(self):
        cfg = small_cfg()
        with pytest.raises(ConfigurationError, match="num_queries"):
            hungarian_match(
                torch.randn(2, 3),
                torch.randn(2, 4, 4),
                torch.ones(3, 8, 8, dtype=torch.bool),
                torch.zeros(3, dtype=torch.long),
                cfg,
            )

    def test_no_gt_leaves_all_unmatched(self):
        cfg = small_cfg()
        result = hungarian_match(
            torch.randn(3, 2),
            torch.randn(3, 4, 4),
            torch.zeros(0, 8, 8, dtype=torch.bool),
            torch.zeros(0, dtype=torch.long),
            cfg,
        )
        assert result.pairs == []
        assert result.unmatched_queries == [0, 1, 2]


class TestCostMatrix:
    def test_cost_formula_matches_manual_computation(self):
        torch.manual_seed(4)
        cfg = LossConfig(num_points=16, lambda_cls=2.0, lambda_ce_seg=5.0, lambda_dice=5.0)
        class_logits = torch.randn(3, 3)
        mask_logits = torch.randn(3, 6, 6)
        gt = torch.zeros(2, 6, 6, dtype=torch.bool)
        gt[0, :3] = True
        gt[1, :, :2] = True
        labels = torch.tensor([0, 1])
        coords = sample_point_coords(16)
        cost = match_cost_matrix(class_logits, mask_logits, gt, labels, cfg, coords)
        pred_pts = point_sample(mask_logits, coords)
        gt_pts = point_sample(gt.float(), coords)
        probs = class_logits.softmax(-1)
        for q in range(3):
            for g in range(2):
                ce = torch.nn.functional.binary_cross_entropy_with_logits(
                    pred_pts[q], gt_pts[g]
                )
                p = pred_pts[q].sigmoid()
                dice = 1 - (2 * (p * gt_pts[g]).sum() + 1.0) / (p.sum() + gt_pts[g].sum() + 1.0)
                expected = (
                    2.0 * -probs[q, labels[g]].log() + 5.0 * ce + 5.0 * dice
                )
                assert cost[q, g].item() == pytest.approx(expected.item(), rel=1e-5)

    def test_loss_invariant_to_query_permutation(self):
        # matching absorbs a simultaneous permutation of queries
        from mcsam.losses import image_loss

        torch.manual_seed(11)
        cfg = LossConfig(num_points=64)
        class_logits = torch.randn(5, 2)
        mask_logits = torch.randn(5, 8, 8)
        gt = torch.zeros(2, 16, 16, dtype=torch.bool)
        gt[0, :8] = True
        gt[1, 8:] = True
        labels = torch.tensor([0, 0])
        torch.manual_seed(77)
        base = image_loss(class_logits, mask_logits, gt, labels, cfg)
        perm = torch.tensor([4, 2, 0, 1, 3])
        torch.manual_seed(77)
        permuted = image_loss(class_logits[perm], mask_logits[perm], gt, labels, cfg)
        for key in base:
            assert base[key].item() == pytest.approx(permuted[key].item(), rel=1e-6)

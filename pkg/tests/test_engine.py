import json
import os

import numpy as np
import pytest
import torch

from conftest import tiny_run_config
from mcsam.data.synthetic import make_rectangle_dataset
from mcsam.engine import (
    BatchLoader,
    Trainer,
    dry_run,
    evaluate_checkpoint,
    model_frame_to_original,
    predict_images,
    render_overlay,
)
from mcsam.data.coco import load_coco
from mcsam.data.transforms import PreprocessConfig
from mcsam.exceptions import ConfigurationError, NumericError
from mcsam.rle import decode_rle


def synth_config(tmp_path, **over):
    ann, imgs = make_rectangle_dataset(str(tmp_path / "synth"), num_images=2, image_size=64, seed=3)
    overrides = {
        "data.train_annotations": ann,
        "data.train_images": imgs,
        "data.val_annotations": ann,
        "data.val_images": imgs,
        "output_dir": str(tmp_path / "run"),
    }
    overrides.update(over)
    return tiny_run_config(**overrides)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = synth_config(tmp, epochs=30, eval_interval=30)
    trainer = Trainer(cfg)
    last = trainer.train()
    return cfg, trainer, last


class TestTraining:
    def test_loss_drops_and_stays_finite(self, trained):
        _, trainer, _ = trained
        losses = [r["loss"] for r in trainer.history["steps"]]
        assert all(np.isfinite(losses))
        assert losses[-1] < 0.5 * losses[0]
        for key in ("ce_cls", "ce_seg", "dice"):
            assert all(np.isfinite([r[key] for r in trainer.history["steps"]]))

    def test_eval_runs_and_reports(self, trained):
        _, trainer, _ = trained
        assert trainer.history["evals"]
        final = trainer.history["evals"][-1]
        assert 0.0 <= final["ap_mask"] <= 100.0
        assert final["ap_mask"] <= final["ap_mask_50"]

    def test_checkpoints_written(self, trained):
        cfg, _, last = trained
        assert os.path.exists(os.path.join(cfg.output_dir, "last.pt"))
        assert os.path.exists(os.path.join(cfg.output_dir, "train_log.jsonl"))
        assert last.endswith("last.pt")

    def test_freeze_policy_honored_inside_real_run(self, tmp_path):
        cfg = synth_config(tmp_path, epochs=2)
        trainer = Trainer(cfg)
        before = {k: v.clone() for k, v in trainer.model.state_dict().items()}
        trainer.train()
        after = trainer.model.state_dict()
        changed_mona = unchanged_frozen = 0
        for name in before:
            if ".mona" in name:
                if not torch.equal(before[name], after[name]):
                    changed_mona += 1
            elif name.startswith("encoder."):
                assert torch.equal(before[name], after[name]), name
                unchanged_frozen += 1
        assert changed_mona > 0 and unchanged_frozen > 0

    def test_lambda_cls_only_total_equals_logged_component(self, tmp_path):
        cfg = synth_config(
            tmp_path, epochs=1,
            **{"loss.lambda_ce_seg": 0.0, "loss.lambda_dice": 0.0, "loss.lambda_cls": 2.0},
        )
        trainer = Trainer(cfg)
        trainer.train()
        for record in trainer.history["steps"]:
            assert record["loss"] == pytest.approx(2.0 * record["ce_cls"], rel=1e-6)

    def test_non_finite_loss_aborts_with_checkpoint_reference(self, tmp_path, monkeypatch):
        cfg = synth_config(tmp_path, epochs=1)
        trainer = Trainer(cfg)

        def bad_loss(pred, targets, cfg_, generator=None):
            t = torch.tensor(float("nan"), requires_grad=True)
            return t, {"ce_cls": t, "ce_seg": t, "dice": t}

        monkeypatch.setattr("mcsam.engine.total_loss", bad_loss)
        with pytest.raises(NumericError, match="checkpoint"):
            trainer.train()

    def test_wrong_num_classes_rejected(self, tmp_path):
        cfg = synth_config(tmp_path, **{"decoder.num_classes": 3})
        with pytest.raises(ConfigurationError, match="num_classes"):
            Trainer(cfg)

    def test_out_of_memory_gets_batch_size_guidance(self, tmp_path, monkeypatch):
        cfg = synth_config(tmp_path, epochs=1)
        trainer = Trainer(cfg)

        class Boom:
            def train(self):
                return self

            def parameters(self):
                return iter([])

            def __call__(self, images):
                raise RuntimeError("CUDA out of memory. Tried to allocate 1.00 GiB")

        monkeypatch.setattr(trainer, "model", Boom())
        with pytest.raises(RuntimeError, match="reduce\\s+data.batch_size"):
            trainer.train()


class TestResume:
    def test_bitwise_identical_trajectory(self, tmp_path):
        cfg_a = synth_config(tmp_path / "a", epochs=4)
        full = Trainer(cfg_a)
        full.train()
        full_losses = [r["loss"] for r in full.history["steps"]]

        cfg_b = synth_config(tmp_path / "b", epochs=2)
        first = Trainer(cfg_b)
        first.train()
        ckpt = os.path.join(cfg_b.output_dir, "last.pt")
        cfg_b2 = synth_config(tmp_path / "b", epochs=4)
        second = Trainer(cfg_b2, resume=ckpt)
        assert second.start_epoch == 2
        second.train()
        resumed_losses = [r["loss"] for r in second.history["steps"]]
        assert resumed_losses == full_losses


class TestLoader:
    def test_worker_count_does_not_change_stream(self, tmp_path):
        ann, imgs = make_rectangle_dataset(str(tmp_path / "s"), num_images=4, image_size=64, seed=1)
        ds = load_coco(ann, imgs)
        prep = PreprocessConfig(image_size=64, mean=(0, 0, 0), std=(1, 1, 1), hflip_prob=0.5)
        seq = BatchLoader(ds, prep, 2, train_mode=True, seed=5, num_workers=0)
        par = BatchLoader(ds, prep, 2, train_mode=True, seed=5, num_workers=3)
        for a, b in zip(seq.batches(epoch=2), par.batches(epoch=2)):
            assert torch.equal(a["images"], b["images"])
            assert [m["image_id"] for m in a["meta"]] == [m["image_id"] for m in b["meta"]]

    def test_epochs_reshuffle_deterministically(self, tmp_path):
        ann, imgs = make_rectangle_dataset(str(tmp_path / "s"), num_images=4, image_size=64, seed=1)
        ds = load_coco(ann, imgs)
        prep = PreprocessConfig(image_size=64, mean=(0, 0, 0), std=(1, 1, 1))
        loader = BatchLoader(ds, prep, 4, train_mode=True, seed=5)
        ids_epoch0 = [m["image_id"] for b in loader.batches(0) for m in b["meta"]]
        ids_epoch0_again = [m["image_id"] for b in loader.batches(0) for m in b["meta"]]
        ids_epoch1 = [m["image_id"] for b in loader.batches(1) for m in b["meta"]]
        assert ids_epoch0 == ids_epoch0_again
        assert sorted(ids_epoch1) == sorted(ids_epoch0)


class TestEvaluateCheckpoint:
    def test_two_deterministic_runs_give_identical_reports(self, trained):
        from mcsam.engine import evaluate_model

        cfg, trainer, _ = trained
        a = evaluate_model(trainer.model, trainer.val_set, cfg)
        b = evaluate_model(trainer.model, trainer.val_set, cfg)
        assert a.as_dict() == b.as_dict()

    def test_random_weight_model_bounds(self, tmp_path):
        from mcsam.engine import evaluate_model

        cfg = synth_config(tmp_path)
        trainer = Trainer(cfg)  # untrained; random decoder
        report = evaluate_model(trainer.model, trainer.val_set, cfg)
        for value in report.as_dict().values():
            assert 0.0 <= value <= 100.0

    def test_report_round_trip(self, trained):
        cfg, _, last = trained
        report = evaluate_checkpoint(cfg, last)
        assert 0 <= report.ap_mask <= 100
        assert os.path.exists(os.path.join(cfg.output_dir, "eval_report.txt"))

    def test_category_table_mismatch_is_error(self, trained, tmp_path):
        cfg, _, last = trained
        import copy

        other = copy.deepcopy(cfg)
        ann, imgs = make_rectangle_dataset(str(tmp_path / "other"), num_images=2, image_size=64, seed=9)
        data = json.load(open(ann))
        data["categories"] = [{"id": 1, "name": "renamed"}]
        json.dump(data, open(ann, "w"))
        other.data.val_annotations = ann
        other.data.val_images = imgs
        with pytest.raises(ConfigurationError, match="category table"):
            evaluate_checkpoint(other, last)


class TestPredict:
    def test_results_rle_decode_recount_oracle(self, trained, tmp_path):
        cfg, trainer, last = trained
        image_paths = sorted(
            os.path.join(cfg.data.train_images, f) for f in os.listdir(cfg.data.train_images)
        )
        out_dir = str(tmp_path / "pred")
        results_path, errors = predict_images(
            cfg, last, image_paths, score_threshold=0.0, viz=True, out_dir=out_dir
        )
        assert errors == []
        results = json.load(open(results_path))
        assert results, "trained model produced no detections"
        for entry in results:
            mask = decode_rle(entry["segmentation"])
            assert mask.sum() == sum(entry["segmentation"]["counts"][1::2])
            assert {"image_id", "category_id", "segmentation", "score"} <= set(entry)
        overlays = [f for f in os.listdir(out_dir) if f.endswith("_overlay.png")]
        assert len(overlays) == len(image_paths)

    def test_threshold_above_one_gives_empty_results(self, trained, tmp_path):
        cfg, _, last = trained
        image_paths = sorted(
            os.path.join(cfg.data.train_images, f) for f in os.listdir(cfg.data.train_images)
        )[:1]
        results_path, _ = predict_images(
            cfg, last, image_paths, score_threshold=1.01, out_dir=str(tmp_path / "p2")
        )
        assert json.load(open(results_path)) == []

    def test_unreadable_image_reports_error_and_continues(self, trained, tmp_path):
        cfg, _, last = trained
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"not an image")
        good = sorted(
            os.path.join(cfg.data.train_images, f) for f in os.listdir(cfg.data.train_images)
        )[:1]
        results_path, errors = predict_images(
            cfg, last, [str(bad)] + good, score_threshold=0.0, out_dir=str(tmp_path / "p3")
        )
        assert len(errors) == 1 and "broken.png" in errors[0]["file"]
        manifest = json.load(open(os.path.join(str(tmp_path / "p3"), "predict_manifest.json")))
        assert len(manifest) == 1  # the good image still processed

    def test_overlay_colors_exactly_the_mask(self):
        image = np.zeros((8, 8, 3), np.uint8)
        mask = np.zeros((8, 8), bool)
        mask[2:5, 3:6] = True
        overlay = render_overlay(image, [mask])
        changed = (overlay != image).any(axis=2)
        assert np.array_equal(changed, mask)


class TestHelpers:
    def test_model_frame_to_original(self):
        mask = np.zeros((16, 16), bool)
        mask[:8, :12] = True
        out = model_frame_to_original(mask, valid_hw=(8, 12), original_hw=(4, 6))
        assert out.shape == (4, 6)
        assert out.all()

    def test_dry_run_tiny(self):
        cfg = tiny_run_config()
        report = dry_run(cfg)
        assert np.isfinite(report["loss"])
        assert 0 < report["trainable_fraction"] < 1
        assert report["tensors_with_grad"] > 0

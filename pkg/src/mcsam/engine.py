"""Config-driven training, evaluation and prediction.

Single-process reference implementation: AdamW over the policy's trainable
parameters, linear warmup + cosine annealing stepped per optimizer update,
per-epoch checkpoints (last + best by mask AP) carrying optimizer, schedule
and RNG state so a resumed run reproduces the loss trajectory.
"""

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor

import cv2
import numpy as np
import torch

from mcsam.aggregator import AggregatorConfig
from mcsam.config import RunConfig, config_from_dict, resolve_policy, to_plain
from mcsam.data.coco import load_coco
from mcsam.data.transforms import PreprocessConfig, preprocess
from mcsam.evaluation import Detection, GroundTruth, EvalReport, evaluate_detections
from mcsam.exceptions import ConfigurationError, NumericError
from mcsam.losses import total_loss
from mcsam.model import MCSamSeg, apply_peft, postprocess
from mcsam.mona import MonaConfig
from mcsam.peft import AdapterConfig, LoraConfig, apply_policy, trainable_fraction
from mcsam.rle import encode_rle
from mcsam.schedule import WarmupCosineSchedule
from mcsam.weights import load_pretrained

logger = logging.getLogger(__name__)


def build_model(cfg: RunConfig, allow_missing_weights=False) -> MCSamSeg:
    """Construct the network, import pretrained encoder weights, then
    inject the configured PEFT modules."""
    enc = cfg.encoder
    agg = AggregatorConfig(
        in_channels=enc.embed_dim,
        mid_channels=cfg.aggregator.mid_channels,
        out_channels=enc.neck_out_channels,
        num_taps=len(enc.tap_indices),
        norm=cfg.aggregator.norm,
    )
    model = MCSamSeg(enc, agg, cfg.pixel_decoder, cfg.decoder)
    load_pretrained(
        model.encoder,
        cfg.weights.source,
        cfg.weights.path or None,
        allow_missing_file=allow_missing_weights,
    )
    apply_peft(
        model.encoder,
        cfg.peft.method,
        mona_cfg=MonaConfig(
            input_channels=enc.embed_dim,
            bottleneck_channels=cfg.peft.mona_bottleneck,
            kernel_sizes=cfg.peft.mona_kernel_sizes,
        )
        if cfg.peft.method == "mona"
        else None,
        adapter_cfg=AdapterConfig(bottleneck=cfg.peft.adapter_bottleneck),
        lora_cfg=LoraConfig(rank=cfg.peft.lora_rank, alpha=cfg.peft.lora_alpha),
    )
    return model.to(cfg.device)


def _prep_config(cfg: RunConfig) -> PreprocessConfig:
    return PreprocessConfig(
        image_size=cfg.data.image_size,
        mean=cfg.data.mean,
        std=cfg.data.std,
        hflip_prob=cfg.data.hflip_prob,
    )


def collate(samples):
    return {
        "images": torch.stack([s["image"] for s in samples]),
        "targets": [{"masks": s["masks"], "labels": s["labels"]} for s in samples],
        "meta": [
            {k: s[k] for k in ("image_id", "valid_hw", "scale", "file_name")} for s in samples
        ],
    }


class BatchLoader:
    """Seeded, order-preserving batch iterator. Worker threads may decode
    and preprocess concurrently; batch order follows the epoch permutation
    regardless of worker count."""

    def __init__(self, dataset, prep, batch_size, train_mode, seed, num_workers=0):
        self.dataset = dataset
        self.prep = prep
        self.batch_size = batch_size
        self.train_mode = train_mode
        self.seed = seed
        self.num_workers = num_workers
        self.counters = {}

    def steps_per_epoch(self):
        return math.ceil(len(self.dataset) / self.batch_size)

    def _prepare(self, idx, sample_seed):
        raw = self.dataset[int(idx)]
        rng = np.random.default_rng(int(sample_seed))
        return preprocess(raw, self.prep, train_mode=self.train_mode, rng=rng, counters=self.counters)

    def batches(self, epoch):
        n = len(self.dataset)
        rng = np.random.default_rng([self.seed, epoch, 1 if self.train_mode else 2])
        order = rng.permutation(n) if self.train_mode else np.arange(n)
        sample_seeds = rng.integers(0, 2**62, size=n)
        for start in range(0, n, self.batch_size):
            chunk = order[start : start + self.batch_size]
            seeds = sample_seeds[start : start + self.batch_size]
            if self.num_workers > 0:
                with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                    samples = list(pool.map(self._prepare, chunk, seeds))
            else:
                samples = [self._prepare(i, s) for i, s in zip(chunk, seeds)]
            yield collate(samples)


def model_frame_to_original(mask, valid_hw, original_hw):
    """Undo padding and resizing: crop the valid region and resize the
    binary mask back to the source raster."""
    nh, nw = valid_hw
    h, w = original_hw
    cropped = mask[:nh, :nw].astype(np.uint8)
    if (nh, nw) == (h, w):
        return cropped.astype(bool)
    return cv2.resize(cropped, (w, h), interpolation=cv2.INTER_NEAREST).astype(bool)


class Trainer:
    def __init__(self, cfg: RunConfig, resume=None):
        self.cfg = cfg
        os.makedirs(cfg.output_dir, exist_ok=True)
        torch.manual_seed(cfg.seed)
        self.train_set = load_coco(cfg.data.train_annotations, cfg.data.train_images, "train")
        if self.train_set.num_classes != cfg.decoder.num_classes:
            raise ConfigurationError(
                f"decoder.num_classes={cfg.decoder.num_classes} but dataset has "
                f"{self.train_set.num_classes} categories"
            )
        self.val_set = None
        if cfg.data.val_annotations:
            self.val_set = load_coco(cfg.data.val_annotations, cfg.data.val_images, "val")
        self.model = build_model(cfg)
        self.policy_report = apply_policy(self.model, resolve_policy(cfg.freeze_policy))
        logger.info("policy:\n%s", self.policy_report.summary())
        self.loader = BatchLoader(
            self.train_set,
            _prep_config(cfg),
            cfg.data.batch_size,
            train_mode=True,
            seed=cfg.seed,
            num_workers=cfg.data.num_workers,
        )
        trainable = [p for p in self.model.parameters() if p.requires_grad]
        if not trainable:
            raise ConfigurationError("freeze policy leaves no trainable parameters")
        self.optimizer = torch.optim.AdamW(
            trainable, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay
        )
        spe = self.loader.steps_per_epoch()
        updates_per_epoch = math.ceil(spe / cfg.data.accum_steps)
        self.schedule = WarmupCosineSchedule(
            self.optimizer,
            base_lr=cfg.optimizer.lr,
            warmup_steps=max(1, round(cfg.schedule.warmup_epochs * updates_per_epoch)),
            total_steps=max(1, cfg.epochs * updates_per_epoch),
            min_lr=cfg.schedule.min_lr,
        )
        self.start_epoch = 0
        self.global_step = 0
        self.history = {"steps": [], "evals": []}
        self.best_ap = -1.0
        self.last_ckpt_path = None
        self._log_fh = None
        if resume:
            self.load_checkpoint(resume)

    # -- checkpointing ----------------------------------------------------

    def checkpoint_payload(self, epoch):
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "schedule": self.schedule.state_dict(),
            "epoch": epoch,
            "global_step": self.global_step,
            "config": to_plain(self.cfg),
            "categories": self.train_set.categories,
            "rng_torch": torch.get_rng_state(),
            "history": self.history,
            "best_ap": self.best_ap,
        }

    def save_checkpoint(self, name, epoch):
        path = os.path.join(self.cfg.output_dir, name)
        torch.save(self.checkpoint_payload(epoch), path)
        self.last_ckpt_path = path
        return path

    def load_checkpoint(self, path):
        state = torch.load(path, map_location="cpu", weights_only=True)
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.schedule.load_state_dict(state["schedule"])
        self.start_epoch = state["epoch"]
        self.global_step = state["global_step"]
        self.history = state["history"]
        self.best_ap = state.get("best_ap", -1.0)
        torch.set_rng_state(state["rng_torch"])
        self.last_ckpt_path = path

    # -- training ---------------------------------------------------------

    def _log_step(self, record):
        self.history["steps"].append(record)
        if self._log_fh is None:
            self._log_fh = open(os.path.join(self.cfg.output_dir, "train_log.jsonl"), "a")
        self._log_fh.write(json.dumps(record) + "\n")
        self._log_fh.flush()

    def train(self):
        cfg = self.cfg
        final_path = None
        for epoch in range(self.start_epoch, cfg.epochs):
            self._train_epoch(epoch)
            final_path = self.save_checkpoint("last.pt", epoch + 1)
            is_last = epoch + 1 == cfg.epochs
            if self.val_set is not None and (
                (epoch + 1) % cfg.eval_interval == 0 or is_last
            ):
                report = self.evaluate_split(self.val_set)
                self.history["evals"].append({"epoch": epoch + 1, **report.as_dict()})
                logger.info("epoch %d eval:\n%s", epoch + 1, report.to_table())
                if report.ap_mask > self.best_ap:
                    self.best_ap = report.ap_mask
                    self.save_checkpoint("best.pt", epoch + 1)
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None
        return final_path

    def _train_epoch(self, epoch):
        cfg = self.cfg
        self.model.train()
        accum = max(1, cfg.data.accum_steps)
        self.optimizer.zero_grad(set_to_none=True)
        for i, batch in enumerate(self.loader.batches(epoch)):
            images = batch["images"].to(cfg.device)
            targets = [
                {k: v.to(cfg.device) for k, v in t.items()} for t in batch["targets"]
            ]
            try:
                pred = self.model(images)
                loss, comps = total_loss(pred, targets, cfg.loss)
            except (MemoryError, RuntimeError) as err:
                if isinstance(err, MemoryError) or "out of memory" in str(err).lower():
                    raise RuntimeError(
                        "out of memory during the forward pass; reduce "
                        "data.batch_size (and raise data.accum_steps to keep "
                        "the effective batch)"
                    ) from err
                raise
            if not torch.isfinite(loss):
                ref = self.last_ckpt_path or "<none saved yet>"
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {i}; "
                    f"last good checkpoint: {ref}"
                )
            (loss / accum).backward()
            if (i + 1) % accum == 0 or i + 1 == self.loader.steps_per_epoch():
                if cfg.optimizer.clip_grad_norm > 0:
                    torch.nn.utils.clip_grad_norm_(
                        [p for p in self.model.parameters() if p.requires_grad],
                        cfg.optimizer.clip_grad_norm,
                    )
                self.optimizer.step()
                lr = self.schedule.step()
                self.optimizer.zero_grad(set_to_none=True)
            else:
                lr = self.schedule.apply()
            self.global_step += 1
            record = {
                "epoch": epoch,
                "step": self.global_step,
                "loss": float(loss.detach()),
                "lr": lr,
                **{k: float(v.detach()) for k, v in comps.items()},
            }
            self._log_step(record)
            if self.global_step % max(1, cfg.log_interval) == 0:
                logger.info(
                    "step %d loss %.4f (cls %.4f seg %.4f dice %.4f) lr %.2e",
                    self.global_step,
                    record["loss"],
                    record["ce_cls"],
                    record["ce_seg"],
                    record["dice"],
                    lr,
                )

    # -- evaluation ---------------------------------------------------------

    @torch.no_grad()
    def evaluate_split(self, dataset) -> EvalReport:
        return evaluate_model(self.model, dataset, self.cfg)


@torch.no_grad()
def evaluate_model(model, dataset, cfg: RunConfig) -> EvalReport:
    """Full-split inference and COCO AP in the original image frame."""
    model.eval()
    prep = _prep_config(cfg)
    detections, ground_truths = [], []
    for idx in range(len(dataset)):
        raw = dataset[idx]
        sample = preprocess(raw, prep, train_mode=False)
        pred = model(sample["image"][None].to(cfg.device))
        results = postprocess(
            pred, cfg.data.image_size, max_detections=cfg.decoder.num_queries
        )[0]
        original_hw = raw["image"].shape[:2]
        for r in results:
            mask = model_frame_to_original(
                r.mask.cpu().numpy(), sample["valid_hw"], original_hw
            )
            if not mask.any():
                continue
            detections.append(
                Detection(
                    image_id=raw["image_id"],
                    category_id=dataset.label_to_cat[r.label],
                    score=r.score,
                    mask=mask,
                )
            )
        for mask, label in zip(raw["masks"], raw["labels"]):
            ground_truths.append(
                GroundTruth(
                    image_id=raw["image_id"],
                    category_id=dataset.label_to_cat[int(label)],
                    mask=mask,
                )
            )
    return evaluate_detections(detections, ground_truths, max_dets=cfg.decoder.num_queries)


def load_model_from_checkpoint(path, device="cpu"):
    """Rebuild the network from the config snapshot inside a checkpoint."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    cfg = config_from_dict(state["config"])
    cfg.device = device
    model = build_model(cfg, allow_missing_weights=True)
    model.load_state_dict(state["model"])
    return model, cfg, state


def evaluate_checkpoint(cfg: RunConfig, ckpt_path) -> EvalReport:
    model, ckpt_cfg, state = load_model_from_checkpoint(ckpt_path, device=cfg.device)
    dataset = load_coco(cfg.data.val_annotations, cfg.data.val_images, "val")
    if state.get("categories") != dataset.categories:
        raise ConfigurationError(
            "category table mismatch between checkpoint and dataset: "
            f"{state.get('categories')} vs {dataset.categories}"
        )
    report = evaluate_model(model, dataset, cfg)
    out = os.path.join(cfg.output_dir, "eval_report.txt")
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(out, "w") as fh:
        fh.write(report.to_table() + "\n\n" + report.to_kv_text())
    return report


_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (170, 110, 40),
]


def render_overlay(image, masks):
    """Blend a distinct color into each instance's foreground pixels."""
    out = image.astype(np.float32)
    for i, mask in enumerate(masks):
        color = np.array(_PALETTE[i % len(_PALETTE)], dtype=np.float32)
        out[mask] = 0.5 * out[mask] + 0.5 * color
    return out.astype(np.uint8)


def predict_images(cfg: RunConfig, ckpt_path, image_paths, score_threshold=0.75, viz=False, out_dir=None):
    """Run inference on arbitrary images and write a COCO results file.

    Unreadable images produce a per-file error entry and the batch
    continues. Returns (results_path, errors).
    """
    model, _, state = load_model_from_checkpoint(ckpt_path, device=cfg.device)
    model.eval()
    label_to_cat = {
        i: c["id"] for i, c in enumerate(state.get("categories") or [{"id": 1, "name": "object"}])
    }
    prep = _prep_config(cfg)
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    results, manifest, errors = [], [], []
    with torch.no_grad():
        for image_id, path in enumerate(image_paths, start=1):
            img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
            if img is None:
                errors.append({"file": str(path), "error": "unreadable image"})
                logger.error("unreadable image: %s", path)
                continue
            if img.ndim == 3 and img.shape[2] == 4:
                img = img[:, :, :3]
            if img.ndim == 3:
                img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
            raw = {
                "image": img,
                "masks": np.zeros((0,) + img.shape[:2], dtype=bool),
                "labels": np.zeros(0, dtype=np.int64),
                "boxes": np.zeros((0, 4)),
                "image_id": image_id,
                "file_name": os.path.basename(str(path)),
            }
            sample = preprocess(raw, prep, train_mode=False)
            pred = model(sample["image"][None].to(cfg.device))
            instances = postprocess(
                pred,
                cfg.data.image_size,
                max_detections=cfg.decoder.num_queries,
                score_threshold=score_threshold,
            )[0]
            kept_masks = []
            for r in instances:
                mask = model_frame_to_original(
                    r.mask.cpu().numpy(), sample["valid_hw"], img.shape[:2]
                )
                if not mask.any():
                    continue
                kept_masks.append(mask)
                results.append(
                    {
                        "image_id": image_id,
                        "category_id": label_to_cat[r.label],
                        "segmentation": encode_rle(mask),
                        "score": float(r.score),
                    }
                )
            manifest.append({"image_id": image_id, "file_name": str(path)})
            if viz:
                overlay = render_overlay(
                    img if img.ndim == 3 else np.repeat(img[:, :, None], 3, axis=2), kept_masks
                )
                stem = os.path.splitext(os.path.basename(str(path)))[0]
                cv2.imwrite(
                    os.path.join(out_dir, f"{stem}_overlay.png"),
                    cv2.cvtColor(overlay, cv2.COLOR_RGB2BGR),
                )
    results_path = os.path.join(out_dir, "results.json")
    with open(results_path, "w") as fh:
        json.dump(results, fh)
    with open(os.path.join(out_dir, "predict_manifest.json"), "w") as fh:
        json.dump(manifest, fh)
    return results_path, errors


def dry_run(cfg: RunConfig) -> dict:
    """Construct the configured model and run one forward/backward step on
    synthetic data; missing weight files fall back to random init."""
    t0 = time.time()
    model = build_model(cfg, allow_missing_weights=True)
    report = apply_policy(model, resolve_policy(cfg.freeze_policy))
    model.train()
    torch.manual_seed(cfg.seed)
    size = cfg.data.image_size
    images = torch.randn(1, 3, size, size, device=cfg.device)
    masks = torch.zeros(1, size, size, dtype=torch.bool, device=cfg.device)
    masks[:, size // 4 : size // 2, size // 4 : size // 2] = True
    targets = [{"masks": masks, "labels": torch.zeros(1, dtype=torch.long, device=cfg.device)}]
    pred = model(images)
    loss, comps = total_loss(pred, targets, cfg.loss)
    loss.backward()
    grads = sum(
        1 for p in model.parameters() if p.requires_grad and p.grad is not None and p.grad.abs().sum() > 0
    )
    return {
        "loss": float(loss.detach()),
        "components": {k: float(v.detach()) for k, v in comps.items()},
        "trainable_fraction": trainable_fraction(model),
        "trainable_tensors": len(report.trainable),
        "tensors_with_grad": grads,
        "seconds": time.time() - t0,
    }

"""Full network assembly: encoder, aggregation neck, mask decoder.

Top-level module names are part of the checkpoint and freeze-policy
contract: `encoder.*` (backbone, frozen under the default policy except
adapters), `neck.*` (aggregator) and `decoder.*` (pixel + transformer
decoders with their heads).
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from mcsam.aggregator import AggregatorConfig, FeatureAggregator, fuse_with_encoder
from mcsam.encoder import EncoderConfig, ImageEncoder, add_block_adapters
from mcsam.exceptions import ConfigurationError
from mcsam.mona import Mona, MonaConfig
from mcsam.peft import AdapterConfig, BottleneckAdapter, LoraConfig, apply_lora
from mcsam.pixel_decoder import PixelDecoder, PixelDecoderConfig
from mcsam.transformer_decoder import DecoderConfig, InstancePrediction, TransformerDecoder


class MaskDecoder(nn.Module):
    def __init__(self, pixel_cfg: PixelDecoderConfig, decoder_cfg: DecoderConfig, in_channels: int):
        super().__init__()
        self.pixel = PixelDecoder(pixel_cfg, in_channels)
        self.transformer = TransformerDecoder(
            decoder_cfg, pixel_cfg.conv_dim, pixel_cfg.mask_dim
        )

    def forward(self, f_enc) -> InstancePrediction:
        return self.transformer(self.pixel(f_enc))


class MCSamSeg(nn.Module):
    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        aggregator_cfg: AggregatorConfig,
        pixel_cfg: PixelDecoderConfig,
        decoder_cfg: DecoderConfig,
    ):
        super().__init__()
        if aggregator_cfg.out_channels != encoder_cfg.neck_out_channels:
            raise ConfigurationError(
                "aggregator out_channels must equal encoder neck_out_channels"
            )
        if aggregator_cfg.in_channels != encoder_cfg.embed_dim:
            raise ConfigurationError("aggregator in_channels must equal encoder embed_dim")
        if aggregator_cfg.num_taps != len(encoder_cfg.tap_indices):
            raise ConfigurationError("aggregator num_taps must match encoder tap_indices")
        self.encoder = ImageEncoder(encoder_cfg)
        self.neck = FeatureAggregator(aggregator_cfg)
        self.decoder = MaskDecoder(pixel_cfg, decoder_cfg, encoder_cfg.neck_out_channels)
        self.decoder_cfg = decoder_cfg

    def forward(self, images: torch.Tensor) -> InstancePrediction:
        enc = self.encoder(images)
        f_neck = self.neck(enc.taps)
        f_enc = fuse_with_encoder(enc.final_map, f_neck)
        return self.decoder(f_enc)


def apply_peft(encoder: ImageEncoder, method: str, mona_cfg=None, adapter_cfg=None, lora_cfg=None):
    """Inject the configured PEFT modules into a (possibly pretrained)
    encoder. Mona and the plain adapter occupy the two per-block slots;
    LoRA wraps matching linear/conv layers."""
    dim = encoder.cfg.embed_dim
    if method == "none":
        return
    if method == "mona":
        cfg = mona_cfg or MonaConfig(input_channels=dim)
        if cfg.input_channels != dim:
            raise ConfigurationError("mona input_channels must equal encoder embed_dim")
        add_block_adapters(encoder, lambda: Mona(cfg), names=("mona1", "mona2"))
    elif method == "adapter":
        cfg = adapter_cfg or AdapterConfig()
        add_block_adapters(
            encoder,
            lambda: BottleneckAdapter(dim, cfg.bottleneck),
            names=("adapter1", "adapter2"),
        )
    elif method == "lora":
        apply_lora(encoder, lora_cfg or LoraConfig())
    else:
        raise ConfigurationError(f"unknown peft method {method!r}")


@dataclass
class InstanceResult:
    score: float
    label: int  # zero-based class index
    mask: torch.Tensor  # bool, at network input resolution
    box: tuple


@torch.no_grad()
def postprocess(pred: InstancePrediction, image_size: int, max_detections: int, score_threshold: float = 0.0):
    """Rank queries and emit at most `max_detections` instances per image.

    The per-query score is the best non-background class probability times
    the mask quality (mean foreground sigmoid); masks are upsampled to the
    network input size and binarized at 0.5.
    """
    probs = pred.class_logits.softmax(-1)[..., :-1]  # (B, Q, M)
    cls_scores, labels = probs.max(-1)
    mask_probs = F.interpolate(
        pred.mask_logits, size=(image_size, image_size), mode="bilinear", align_corners=False
    ).sigmoid()
    results = []
    for b in range(probs.shape[0]):
        fg = mask_probs[b] > 0.5  # (Q, S, S)
        fg_counts = fg.sum(dim=(1, 2))
        quality = torch.where(
            fg_counts > 0,
            (mask_probs[b] * fg).sum(dim=(1, 2)) / fg_counts.clamp_min(1),
            torch.zeros_like(cls_scores[b]),
        )
        scores = cls_scores[b] * quality
        k = min(max_detections, scores.shape[0])
        top_scores, top_idx = scores.topk(k)
        image_results = []
        for s, qi in zip(top_scores.tolist(), top_idx.tolist()):
            if s < score_threshold:
                continue
            mask = fg[qi]
            if not mask.any():
                continue
            ys, xs = torch.nonzero(mask, as_tuple=True)
            box = (
                float(xs.min()),
                float(ys.min()),
                float(xs.max() - xs.min() + 1),
                float(ys.max() - ys.min() + 1),
            )
            image_results.append(
                InstanceResult(score=s, label=int(labels[b, qi]), mask=mask, box=box)
            )
        results.append(image_results)
    return results

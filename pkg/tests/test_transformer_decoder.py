import pytest
import torch

from mcsam.exceptions import ConfigurationError, ShapeError
from mcsam.pixel_decoder import PyramidLevels
from mcsam.transformer_decoder import (
    DecoderConfig,
    MultiheadAttention,
    TransformerDecoder,
)


def make_decoder(num_queries=4, num_layers=4, hidden=16, num_classes=1):
    cfg = DecoderConfig(
        num_queries=num_queries, num_layers=num_layers, hidden_dim=hidden,
        num_heads=2, ffn_dim=32, num_classes=num_classes,
    )
    return TransformerDecoder(cfg, in_channels=hidden, mask_dim=hidden)


def make_pyramid(batch=1, dim=16, base=4):
    levels = [torch.randn(batch, dim, base, base),
              torch.randn(batch, dim, 2 * base, 2 * base),
              torch.randn(batch, dim, 4 * base, 4 * base)]
    return PyramidLevels(levels=levels, mask_features=torch.randn(batch, dim, 8 * base, 8 * base))


class TestMaskedAttention:
    def test_all_foreground_mask_is_bitwise_identical_to_unmasked(self):
        attn = MultiheadAttention(16, 2)
        q = torch.randn(1, 3, 16)
        kv = torch.randn(1, 7, 16)
        unmasked = attn(q, kv, kv)
        all_false = torch.zeros(1, 2, 3, 7, dtype=torch.bool)
        assert torch.equal(attn(q, kv, kv, mask=all_false), unmasked)

    def test_blocking_mask_changes_output(self):
        attn = MultiheadAttention(16, 2)
        q = torch.randn(1, 3, 16)
        kv = torch.randn(1, 7, 16)
        mask = torch.zeros(1, 2, 3, 7, dtype=torch.bool)
        mask[..., :4] = True
        assert not torch.equal(attn(q, kv, kv, mask=mask), attn(q, kv, kv))


class TestAttentionMaskConstruction:
    def test_all_background_query_falls_back_to_unmasked(self):
        dec = make_decoder()
        logits = torch.full((1, 4, 8, 8), 5.0)  # everything confidently foreground
        logits[0, 2] = -5.0  # one query all background
        mask = dec.attention_mask(logits, (4, 4))
        assert not mask[0, :, 2].any()  # fallback: nothing blocked
        assert not mask[0, :, 0].any()  # foreground everywhere: nothing blocked

    def test_partial_mask_blocks_background(self):
        dec = make_decoder()
        logits = torch.full((1, 4, 8, 8), -5.0)
        logits[0, 1, :4, :] = 5.0  # top half foreground for query 1
        mask = dec.attention_mask(logits, (8, 8))
        blocked = mask[0, 0, 1].view(8, 8)
        assert not blocked[:3].any()
        assert blocked[5:].all()


class TestDecoderForward:
    def test_output_shapes_and_aux(self):
        dec = make_decoder(num_queries=4, num_layers=4)
        out = dec(make_pyramid())
        assert out.class_logits.shape == (1, 4, 2)
        assert out.mask_logits.shape == (1, 4, 32, 32)
        assert len(out.aux_outputs) == 4

    def test_aux_last_equals_final(self):
        dec = make_decoder()
        out = dec(make_pyramid())
        assert torch.equal(out.aux_outputs[-1].class_logits, out.class_logits)
        assert torch.equal(out.aux_outputs[-1].mask_logits, out.mask_logits)

    def test_layer_count_not_multiple_of_levels_allowed(self):
        dec = make_decoder(num_layers=5)
        out = dec(make_pyramid())
        assert len(out.aux_outputs) == 5

    def test_query_permutation_equivariance(self):
        dec = make_decoder(num_queries=5)
        pyramid = make_pyramid()
        out = dec(pyramid)
        perm = torch.tensor([3, 1, 4, 0, 2])
        with torch.no_grad():
            dec.query_feat.weight.copy_(dec.query_feat.weight[perm])
            dec.query_embed.weight.copy_(dec.query_embed.weight[perm])
        permuted = dec(pyramid)
        assert torch.allclose(permuted.class_logits[:, :, :], out.class_logits[:, perm, :], atol=1e-5)
        assert torch.allclose(permuted.mask_logits, out.mask_logits[:, perm], atol=1e-5)

    def test_zero_queries_rejected(self):
        with pytest.raises(ConfigurationError):
            DecoderConfig(num_queries=0)


class TestHeads:
    def test_class_head_shapes_match_query_budgets(self):
        # the two dataset presets: 100 and 30 single-class query sets
        for q in (100, 30):
            dec = make_decoder(num_queries=q, num_classes=1)
            queries = torch.randn(1, q, 16)
            logits = dec.predict_classes(queries)
            assert logits.shape == (1, q, 2)

    def test_orthogonal_query_gives_zero_mask(self):
        dec = make_decoder()
        queries = torch.randn(1, 4, 16)
        embed = dec.mask_head(dec.decoder_norm(queries))
        # mask features orthogonal to every embedding: zero everywhere
        features = torch.zeros(1, 16, 4, 4)
        logits = dec.predict_masks(queries, features)
        assert torch.equal(logits, torch.zeros(1, 4, 4, 4))
        del embed

    def test_constant_features_give_spatially_constant_masks(self):
        dec = make_decoder()
        queries = torch.randn(1, 4, 16)
        features = torch.ones(1, 16, 3, 5) * torch.randn(1, 16, 1, 1)
        logits = dec.predict_masks(queries, features)
        flat = logits.flatten(2)
        assert torch.allclose(flat, flat[..., :1].expand_as(flat), atol=1e-5)

    def test_mask_logits_scale_linearly_with_features(self):
        dec = make_decoder()
        queries = torch.randn(1, 4, 16)
        features = torch.randn(1, 16, 4, 4)
        base = dec.predict_masks(queries, features)
        assert torch.allclose(dec.predict_masks(queries, 2.5 * features), 2.5 * base, atol=1e-5)

    def test_mask_dim_mismatch_is_shape_error(self):
        dec = make_decoder()
        with pytest.raises(ShapeError):
            dec.predict_masks(torch.randn(1, 4, 16), torch.randn(1, 12, 4, 4))

import pytest
import torch

from mcsam.exceptions import ConfigurationError
from mcsam.pixel_decoder import PixelDecoder, PixelDecoderConfig


def make_decoder(conv_dim=8, mask_dim=8, num_layers=1, in_channels=8):
    cfg = PixelDecoderConfig(
        conv_dim=conv_dim, mask_dim=mask_dim, num_layers=num_layers, num_heads=2,
        num_points=2, ffn_dim=16,
    )
    return PixelDecoder(cfg, in_channels)


class TestPyramidShapes:
    def test_stride_arithmetic_full_scale_grid(self):
        # 64x64 stride-16 input (1024px image) -> 32/64/128 levels, 256 mask map
        dec = make_decoder()
        out = dec(torch.randn(1, 8, 64, 64))
        assert [tuple(l.shape[-2:]) for l in out.levels] == [(32, 32), (64, 64), (128, 128)]
        assert tuple(out.mask_features.shape[-2:]) == (256, 256)

    def test_toy_input(self):
        dec = make_decoder()
        out = dec(torch.randn(1, 8, 16, 16))
        assert [tuple(l.shape[-2:]) for l in out.levels] == [(8, 8), (16, 16), (32, 32)]
        assert tuple(out.mask_features.shape[-2:]) == (64, 64)
        assert out.mask_features.shape[1] == 8

    def test_doubling_resolution_doubles_every_side(self):
        dec = make_decoder()
        small = dec(torch.randn(1, 8, 8, 8))
        large = dec(torch.randn(1, 8, 16, 16))
        for a, b in zip(small.levels, large.levels):
            assert 2 * a.shape[-1] == b.shape[-1]
            assert 2 * a.shape[-2] == b.shape[-2]
        assert 2 * small.mask_features.shape[-1] == large.mask_features.shape[-1]

    def test_levels_ordered_coarse_to_fine_and_same_width(self):
        dec = make_decoder()
        out = dec(torch.randn(2, 8, 16, 16))
        sides = [l.shape[-1] for l in out.levels]
        assert sides == sorted(sides)
        assert len({l.shape[1] for l in out.levels}) == 1


class TestValidation:
    def test_non_square_rejected(self):
        dec = make_decoder()
        with pytest.raises(ConfigurationError):
            dec(torch.randn(1, 8, 8, 16))

    def test_tiny_input_rejected(self):
        dec = make_decoder()
        with pytest.raises(ConfigurationError):
            dec(torch.randn(1, 8, 2, 2))

    def test_batched_consistency(self):
        dec = make_decoder()
        x = torch.randn(2, 8, 8, 8)
        both = dec(x)
        one = dec(x[:1])
        assert torch.allclose(both.mask_features[:1], one.mask_features, atol=1e-5)

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def tiny_run_config(**over):
    """Desk-size RunConfig for engine-level tests."""
    from mcsam.config import config_from_dict

    data = {
        "data": {
            "image_size": 64,
            "batch_size": 2,
            "mean": [68.0, 68.0, 68.0],
            "std": [80.0, 80.0, 80.0],
            "hflip_prob": 0.0,
        },
        "encoder": {
            "image_size": 64,
            "patch_size": 16,
            "embed_dim": 32,
            "depth": 2,
            "num_heads": 4,
            "neck_out_channels": 32,
            "tap_indices": [0, 1],
        },
        "peft": {"mona_bottleneck": 16},
        "aggregator": {"mid_channels": 32},
        "pixel_decoder": {
            "conv_dim": 32,
            "mask_dim": 32,
            "num_layers": 2,
            "num_heads": 4,
            "ffn_dim": 64,
        },
        "decoder": {
            "num_queries": 4,
            "num_layers": 3,
            "hidden_dim": 32,
            "num_heads": 4,
            "ffn_dim": 64,
            "num_classes": 1,
        },
        "loss": {"num_points": 64},
        "optimizer": {"lr": 0.001, "clip_grad_norm": 1.0},
        "epochs": 2,
        "eval_interval": 100,
        "log_interval": 1000,
    }
    for key, value in over.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return config_from_dict(data)

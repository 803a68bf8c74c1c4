"""Prompt-free instance segmentation for remote sensing imagery.

A SAM-style ViT image encoder adapted with multi-cognitive (Mona) adapters,
a lightweight feature-aggregation neck, a deformable-attention pixel decoder
and a masked-attention transformer decoder, trained with Hungarian-matched
classification / point-sampled mask losses and evaluated under the COCO
average-precision protocol.
"""

__version__ = "0.1.0"

from mcsam.exceptions import ConfigurationError, NumericError, ShapeError

__all__ = ["ConfigurationError", "NumericError", "ShapeError", "__version__"]

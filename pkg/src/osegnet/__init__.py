"""Encoder-decoder segmentation with a polynomial operational decoder.

Pure numpy implementation: tensors with reverse-mode autodiff, the model and
its layers, losses, metrics, Adam, PGM data handling, and a CLI.
"""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeError

__all__ = ["Tensor", "ShapeError", "__version__"]

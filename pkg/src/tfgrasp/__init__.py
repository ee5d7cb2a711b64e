"""Transformer-based pixel-wise grasp detection, batteries included.

Subpackages: tensor (autodiff engine), attention (windowed self-attention),
model (U-shaped network), geometry (grasp rectangles and metrics), data
(ingestion and synthetic scenes), training (train/eval loops), verify
(oracle suites), cli (command-line surface).
"""

from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad"]
__version__ = "0.1.0"

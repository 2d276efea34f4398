"""Simulated soft-finger body-schema learning toolkit.

Modules: `sim` (finger physics), `sensors` (hysteretic strain sensors),
`render` (images and label masks), `autodiff` (tensors and gradients),
`models` (layer stacks and checkpoints), `datagen` (episodes and datasets),
`train`, `analysis` and `cli`.
"""
from .config import TOOL_VERSION as __version__

__all__ = ["__version__"]

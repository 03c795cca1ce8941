"""Redundancy-robust token and frame selection for masked video autoencoders.

Package map:
    tensor      reverse-mode autodiff on a recorded tape (float32/float64)
    backend     compiled vs numpy kernel selection (EVEREST_BACKEND)
    gradcheck   central finite-difference oracle
    video       EVC1 clip container, manifests, synthetic motion corpora
    embedding   tube patch embedding + fixed sinusoidal positions
    rero        token importance, global top-K selection, visible subsampling
    frameselect candidate expansion and count-weighted pair sampling
    model       toy encoder/decoder, losses, checkpoints (EVCK)
    train       AdamW, schedules, pre-training and fine-tuning loops
    costmodel   analytic FLOPs/activation-memory accounting at ViT scale
    cli         the `everest` command
"""

from . import backend
from .tensor import Graph, NonFiniteError, ShapeError, Tensor

__version__ = "0.1.0"
__all__ = ["Tensor", "Graph", "NonFiniteError", "ShapeError", "backend", "__version__"]

"""handlens: a from-scratch deep-learning toolkit for hand-specimen image classification.

Pure numpy/float64 throughout: a reverse-mode autodiff tensor core,
DenseNet/ResNet builders with exact parameter accounting, a standardize +
augment + k-fold data pipeline, AdamW and one-cycle training with a
learning-rate range test, and precision/recall evaluation.
"""

__version__ = "0.1.0"

from .tensor import Tensor, NonFiniteError, ShapeError, backward, no_grad

__all__ = ["Tensor", "NonFiniteError", "ShapeError", "backward", "no_grad", "__version__"]

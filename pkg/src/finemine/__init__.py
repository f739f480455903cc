"""Semi-supervised fine-grained recognition on synthetic striped textures.

A desk-scale, fully deterministic pipeline: dataset synthesis, a small
conv classifier with hand-written gradients, augmentation and test-time
view toolboxes, iterative ensemble pseudo-label mining with clustering
pretext pretraining, and accuracy-weighted plus shot-routed fusion.
"""

__version__ = "0.1.0"

from .errors import IntegrityError, ValidationError
from .tensorio import TensorFormatError, read_tensor, write_tensor

__all__ = [
    "IntegrityError",
    "TensorFormatError",
    "ValidationError",
    "__version__",
    "read_tensor",
    "write_tensor",
]

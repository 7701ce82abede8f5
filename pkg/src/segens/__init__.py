"""segens: ensemble semantic segmentation on a self-contained autodiff core.

Binary base networks are stacked channel-wise and fused by a rule-based or
trainable head to form a teacher, which can then be distilled into a single
compact student. Includes synthetic field-scene datasets, IOU metrics, FLOPs
accounting and a reproducible experiment CLI.
"""

from .tensor import Tensor, PoolIndices, Tape, Adam, backward, no_grad
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["Tensor", "PoolIndices", "Tape", "Adam", "backward", "no_grad",
           "KERNEL_BACKEND", "__version__"]

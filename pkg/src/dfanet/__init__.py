"""DFANet semantic segmentation: numpy autograd, architecture, cost model, toy training."""

from .backbone import Backbone, BackboneSpec, StageOutputs, build_backbone
from .model import DFANet, ModelSpec, build_dfanet
from .tensor import Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneSpec", "DFANet", "ModelSpec", "StageOutputs", "Tensor",
    "backward", "build_backbone", "build_dfanet", "grad_check",
]

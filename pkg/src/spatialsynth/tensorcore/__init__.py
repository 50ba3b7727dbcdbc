"""Dense tensors, static graphs with reverse-mode AD, layers and Adam."""

from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .graph import (
    Graph, GraphError, Node, ShapeError, Tensor, backward, concat, conv, forward, group_norm, upsample2x,
)
from .layers import (
    Conv2d, Conv3d, CrossAttention, GroupNorm, Linear, Modulation, Module, ModuleList, TemporalConv,
)
from .optim import Adam, NonFiniteGradient

__all__ = [
    "Adam", "Conv2d", "Conv3d", "CrossAttention", "Graph", "GraphError", "GroupNorm", "Linear",
    "Modulation", "Module", "ModuleList", "Node", "NonFiniteGradient", "ShapeError", "Tensor",
    "TemporalConv", "backward", "concat", "conv", "forward", "group_norm", "load_checkpoint",
    "save_checkpoint", "upsample2x",
]

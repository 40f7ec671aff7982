from .core import Adam, Affine, Conv, Flatten, Layer, Pool, ReLU, Tape, TapeNode, adam_step
from .distributed import DistAffine, DistConv, DistPool, DistTranspose
from .local import Window

__all__ = [
    "Adam", "Affine", "Conv", "DistAffine", "DistConv", "DistPool", "DistTranspose",
    "Flatten", "Layer", "Pool", "ReLU", "Tape", "TapeNode", "Window", "adam_step",
]

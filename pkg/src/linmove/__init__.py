"""Linear-algebraic data movement for model-parallel deep learning.

Primitive memory operators and parallel primitives with hand-written adjoints,
an unbalanced halo exchange, and distributed layers, all running on a
simulated multi-worker SPMD runtime.
"""
from .tensor import ContractError, IndexRange, inner_product
from .memory_ops import LinearOp, SubsetPair, adjoint_test
from .partition import Partition, decompose, overlap, broadcast_map
from .comm import spawn, SPMDError
from .halo import KernelSpec, HaloSpec, HaloExchanger, compute_halo, required_input_range

__version__ = "0.1.0"

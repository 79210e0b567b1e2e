"""Differentiable flow warping: TPS coarse flow, layout-constrained deformable
convolution, flow temporal-consistency losses and a toy coarse-to-fine
warping network trained on synthetic sprite sequences."""

from .core import (
    ContractError,
    FlowField,
    FormatError,
    ImageTensor,
    NumericalError,
    SemanticLayout,
    read_flo,
    read_image,
    read_layout,
    write_flo,
    write_image,
    write_layout,
)
from .warp import compose_flows, downsample_flow, warp_backward, warp_backward_grad, warp_flow

__version__ = "0.1.0"

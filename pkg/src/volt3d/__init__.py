"""Standard, depthwise-separable and pseudo-3D convolutions on voxel grids.

Kernels with analytic gradients, closed-form cost models, decoder and VGG
builders, training loops, synthetic voxel data and brute-force reference
implementations.
"""
from . import cost, netgraph, ops, oracle, tensor, training, voxio
from .netgraph import ModelSpec, Network, build_arch, build_network, build_rec_decoder, build_vgg3d

__version__ = "0.1.0"

__all__ = [
    "ModelSpec", "Network", "build_arch", "build_network", "build_rec_decoder", "build_vgg3d",
    "cost", "netgraph", "ops", "oracle", "tensor", "training", "voxio",
]

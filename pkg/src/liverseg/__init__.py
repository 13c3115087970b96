"""Hybrid 2D/3D densely connected UNet pipeline for liver and tumor
segmentation from CT volumes: a from-scratch differentiable tensor engine,
the slice and volume networks with fused feature learning, staged training,
cascaded inference, and the evaluation metric suite."""

__version__ = "0.1.0"

"""Multi-scale skip connected, asymmetric-convolution U-Net for land-cover segmentation."""

__version__ = "0.1.0"

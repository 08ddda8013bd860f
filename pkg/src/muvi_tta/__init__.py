"""Single-image test-time adaptation of 3D segmentation networks via multi-view co-training."""

__version__ = "0.1.0"

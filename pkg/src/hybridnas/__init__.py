"""Semi-supervised hybrid architecture search for dense segmentation."""

__version__ = "0.1.0"

"""Lung segmentation with recurrent criss-cross attention and pseudo-mask augmentation."""

__version__ = "0.1.0"

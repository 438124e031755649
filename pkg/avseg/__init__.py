"""Weakly-supervised audio-visual segmentation."""
__version__ = '0.1.0'

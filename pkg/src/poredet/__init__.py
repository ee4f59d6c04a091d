"""Sweat pore detection in high-resolution fingerprint images.

A small numpy FCN trained on image patches and applied densely, three
handcrafted baselines, an evaluation harness and a synthetic data generator.
"""
__version__ = "0.1.0"

"""Crowd density estimation toolkit: adaptive-kernel ground truth, DMS-SSIM loss,
CRF feature refinement and a miniature multiscale counting network."""

__version__ = "0.1.0"

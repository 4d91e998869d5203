"""Weak-supervision segmentation toolkit: polar-transformation MIL with
loose bounding boxes, a weighted smooth-maximum loss stack, and a
desk-scale differentiable training harness."""

__version__ = "0.1.0"

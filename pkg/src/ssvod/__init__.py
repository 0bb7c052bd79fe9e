"""Semi-supervised video object detection laboratory.

A small, fully inspectable pipeline: synthetic video generation with exact
ground truth, a differentiable grid detector with hand-derived gradients,
flow-warped prediction sets, cross-IoU / cross-divergence pseudo-label
selection, and an EMA teacher-student training loop.
"""

__version__ = "0.1.0"

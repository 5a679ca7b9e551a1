"""Desk-scale sequence labeling lab.

A small, fully deterministic training stack for character-level named
entity recognition: a reverse-mode autodiff tensor core on numpy, clipped
relative positional attention, permutation-LM pretraining with two-stream
attention and segment recurrence, and R-Drop regularized fine-tuning.
"""

__version__ = "0.1.0"

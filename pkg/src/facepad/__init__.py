"""Face anti-spoofing with a shared-backbone two-task network, a pairwise
confusion regularizer, and Gram-matrix domain transfer, on a small numpy
autodiff core."""

__version__ = "0.1.0"

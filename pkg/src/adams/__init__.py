"""Adaptive margin and scale for proxy-based deep metric learning.

A small numpy engine: AdaMS / Asymmetric-Proxy losses with closed-form
gradients, a two-view feed-forward encoder, synthetic word-discrimination
data and pairwise average-precision evaluation.
"""

__version__ = "0.1.0"

"""Low-rank Tucker estimation by scaled gradient descent.

Factorization, completion and regression solvers sharing one ScaledGD step,
with spectral initializations, a plain GD baseline and an experiment harness.
"""

__version__ = "0.1.0"

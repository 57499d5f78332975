"""Order-independent aggregation of per-path Monte Carlo values."""

import math

import numpy as np


def mean_se(values):
    """Sample mean and standard error of a 1-d array.

    The sum is compensated (``math.fsum``) around the first value, so the
    result does not depend on batch order and a constant sample returns its
    value exactly with zero standard error.
    """
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if n < 2:
        raise ValueError("need at least two samples for a standard error")
    shift = v[0]
    d = v - shift
    mean_d = math.fsum(d) / n
    var = math.fsum((d - mean_d) ** 2) / (n - 1)
    return float(shift + mean_d), math.sqrt(var / n)


def power_se(mean, se, p):
    """Delta-method standard error of ``mean ** p``."""
    return abs(p) * abs(mean) ** (p - 1.0) * se if mean != 0 else 0.0

"""Input validation helpers shared by the estimators and functional API."""

import math
import numbers

import numpy as np

WEIGHT_SUM_TOL = 1e-9


def check_weights(weights, n, name="weights"):
    """Return ``weights`` as a float list of length ``n`` (uniform when None)."""
    if weights is None:
        if n < 1:
            raise ValueError(f"{name}: need at least one operand")
        return [1.0 / n] * n
    weights = [float(w) for w in weights]
    if len(weights) != n:
        raise ValueError(f"{name}: expected {n} values, got {len(weights)}")
    if any(not math.isfinite(w) or w < 0 for w in weights):
        raise ValueError(f"{name}: must be finite and non-negative, got {weights}")
    if abs(math.fsum(weights) - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"{name}: must sum to 1, got {math.fsum(weights)!r}")
    return weights


def check_interval(value, name, lo, hi, *, lo_open=False, hi_open=False):
    """Check ``value`` lies in the interval between ``lo`` and ``hi``."""
    if not isinstance(value, numbers.Real) or not math.isfinite(value):
        raise ValueError(f"{name} must be a finite real, got {value!r}")
    value = float(value)
    below = value <= lo if lo_open else value < lo
    above = value >= hi if hi_open else value > hi
    if below or above:
        left = "(" if lo_open else "["
        right = ")" if hi_open else "]"
        raise ValueError(f"{name} must be in {left}{lo}, {hi}{right}, got {value}")
    return value


def check_seed(seed):
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, numbers.Integral):
        raise ValueError(f"seed must be an integer, got {seed!r}")
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return int(seed)


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_letters(letters):
    letters = list(letters)
    if not letters:
        raise ValueError("letters must be non-empty")
    if len(set(letters)) != len(letters):
        raise ValueError(f"letters must be distinct, got {letters}")
    return letters

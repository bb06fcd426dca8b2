"""Cosine map between unconstrained angles and bounded element values.

``log x = mid + half * cos(alpha)`` with ``mid`` and ``half`` the centre
and half-width of ``[log x_min, log x_max]``.  Any real ``alpha`` lands
inside the bounds, so the optimizer never needs clipping.
"""

from __future__ import annotations

import numpy as np


def _log_params(lower, upper):
    lo, hi = np.log(np.asarray(lower, float)), np.log(np.asarray(upper, float))
    return (hi + lo) / 2, (hi - lo) / 2


def from_alpha(alpha, lower, upper):
    mid, half = _log_params(lower, upper)
    # the clip only absorbs the last-ulp error of exp(log(bound))
    return np.clip(np.exp(mid + half * np.cos(alpha)), lower, upper)


def to_alpha(x, lower, upper):
    """Inverse on the principal branch ``alpha in [0, pi]``."""
    x = np.asarray(x, float)
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    if np.any(x < lower * (1 - 1e-12)) or np.any(x > upper * (1 + 1e-12)):
        raise ValueError("value outside its bounds")
    mid, half = _log_params(lower, upper)
    return np.arccos(np.clip((np.log(x) - mid) / half, -1.0, 1.0))


def dx_dalpha(alpha, lower, upper):
    mid, half = _log_params(lower, upper)
    return -from_alpha(alpha, lower, upper) * half * np.sin(alpha)


def reparam_chain(grad_x, alpha, lower, upper):
    """dL/dalpha from dL/dx; zero where the map saturates at a bound."""
    return np.asarray(grad_x, float) * dx_dalpha(alpha, lower, upper)

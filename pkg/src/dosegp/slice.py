"""Univariate slice sampling with stepping-out and shrinkage."""

from __future__ import annotations

import numpy as np

from .errors import InputError


def slice_sample(
    log_density,
    current: float,
    width: float = 1.0,
    max_stepout: int = 50,
    rng: np.random.Generator | None = None,
    current_logp: float | None = None,
    return_logp: bool = False,
):
    """One slice-sampling update of a scalar.

    The initial bracket of size ``width`` is placed uniformly around
    ``current`` and stepped out at most ``max_stepout`` times in total,
    split randomly between the two sides, then shrunk toward ``current``
    until a point inside the slice is drawn.
    """
    if rng is None:
        rng = np.random.default_rng()
    lp0 = log_density(current) if current_logp is None else current_logp
    if not np.isfinite(lp0):
        raise InputError(f"log density is not finite at the current point {current!r}")
    if not width > 0:
        raise InputError("width must be positive")
    log_level = lp0 - rng.standard_exponential()

    left = current - width * rng.uniform()
    right = left + width
    j = int(max_stepout * rng.uniform())
    k = max_stepout - 1 - j
    while j > 0 and log_density(left) > log_level:
        left -= width
        j -= 1
    while k > 0 and log_density(right) > log_level:
        right += width
        k -= 1

    while True:
        x1 = left + rng.uniform() * (right - left)
        lp1 = log_density(x1)
        if lp1 > log_level:
            return (x1, lp1) if return_logp else x1
        if x1 < current:
            left = x1
        else:
            right = x1
        if right - left < 1e-12 * max(1.0, abs(current)):
            # bracket collapsed onto the current point
            return (current, lp0) if return_logp else current

# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Closed-form references for one-dimensional two-phase media.

In 1D the homogenized coefficient is the harmonic mean of the cell values. For a
Boolean model of unit segments around Poisson points of intensity mu, a site is
uncovered with probability exp(-2 mu), which gives

    A(mu) = 1 / (exp(-2 mu) / alpha + (1 - exp(-2 mu)) / beta).

Thinning with probability p turns intensity lambda into p lambda, so the p-Taylor
coefficients are lambda^j times the mu-derivatives of A at zero.
"""

import math
from typing import List, Sequence

import numpy as np
from scipy import special

from errors import ParameterError


def _check_band(alpha: float, beta: float) -> None:
    if not 0 < alpha <= beta:
        raise ParameterError(f"need 0 < alpha <= beta, got {alpha}, {beta}")


def ball_volume(d: int) -> float:
    """Volume of the unit ball in dimension d."""
    return float(math.pi ** (d / 2) / special.gamma(d / 2 + 1))


def vacancy(intensity: float, d: int) -> float:
    """Probability that a fixed site lies outside every unit ball of a Boolean model."""
    return float(np.exp(-intensity * ball_volume(d)))


def homogenized_1d(mu: float, alpha: float = 1.0, beta: float = 4.0) -> float:
    _check_band(alpha, beta)
    uncovered = np.exp(-2.0 * mu)
    return float(1.0 / (uncovered / alpha + (1.0 - uncovered) / beta))


def harmonic_mean(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=float)
    return float(1.0 / np.mean(1.0 / values))


def arithmetic_mean(values: Sequence[float]) -> float:
    return float(np.mean(np.asarray(values, dtype=float)))


def _reciprocal_series(g: Sequence[float]) -> List[float]:
    f = [1.0 / g[0]]
    for n in range(1, len(g)):
        f.append(-sum(g[k] * f[n - k] for k in range(1, n + 1)) / g[0])
    return f


def taylor_coefficients_1d(
    intensity: float, order: int, alpha: float = 1.0, beta: float = 4.0
) -> List[float]:
    """d^j/dp^j of p -> A(p * intensity) at p = 0, for j = 0..order.

    1/A(mu) = 1/beta + exp(-2 mu) (1/alpha - 1/beta) is expanded in mu and inverted
    as a power series.
    """
    _check_band(alpha, beta)
    if order < 0:
        raise ParameterError(f"order must be non-negative, got {order}")
    gap = 1.0 / alpha - 1.0 / beta
    g = [1.0 / alpha] + [(-2.0) ** k / math.factorial(k) * gap for k in range(1, order + 1)]
    f = _reciprocal_series(g)
    return [intensity**j * math.factorial(j) * f[j] for j in range(order + 1)]


def taylor_remainder_1d(
    p: float, intensity: float, k: int, alpha: float = 1.0, beta: float = 4.0
) -> float:
    """|A(p lambda) - sum_{j<=k} p^j/j! A^j| for the closed form."""
    coefficients = taylor_coefficients_1d(intensity, k, alpha, beta)
    partial = sum(p**j / math.factorial(j) * c for j, c in enumerate(coefficients))
    return abs(homogenized_1d(p * intensity, alpha, beta) - partial)

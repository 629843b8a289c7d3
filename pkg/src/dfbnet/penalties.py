"""Proximity operators and the Bregman penalty for the l-infinity ball.

The network's sparsity regularizer is ``r(x) = radius * ||x||_1``. Its convex
conjugate is the indicator of the centered l-infinity ball of that radius, so
the dual prox is a componentwise clamp, independent of any positive step
scaling of the indicator. The penalty

    B(u, v) = q(u) + q*(v) - <u, v>,    q(u) = ||u||^2 / 2 + indicator(u)

is non-negative, vanishes exactly at ``u = clamp(v)``, and is differentiable
in ``v`` with gradient ``clamp(v) - u``. ``q*`` is the componentwise Huber
function of the ball radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FEASIBILITY_TOL = 1e-12


def soft_threshold(v: np.ndarray, threshold: float) -> np.ndarray:
    """Componentwise soft-thresholding, the prox of ``threshold * ||.||_1``.

    Implemented as ``v - clip(v)`` so that soft-thresholding and the ball
    projection decompose ``v`` exactly (Moreau identity holds bitwise).
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    return v - np.clip(v, -threshold, threshold)


def huber(t: np.ndarray, radius: float) -> np.ndarray:
    """Componentwise Huber function: quadratic inside [-radius, radius], affine outside."""
    a = np.abs(np.asarray(t, dtype=np.float64))
    inner = np.minimum(a, radius)
    return 0.5 * inner * inner + radius * (a - inner)


@dataclass(frozen=True)
class LinfBall:
    """Centered l-infinity ball, the domain of the dual variables.

    ``radius`` is the weight of the l1 regularizer whose conjugate this ball
    indicates; it must be strictly positive.
    """

    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be strictly positive")

    def project(self, v: np.ndarray) -> np.ndarray:
        """Componentwise clamp to [-radius, radius], the prox of the indicator."""
        return np.clip(np.asarray(v, dtype=np.float64), -self.radius, self.radius)

    def contains(self, u: np.ndarray, tol: float = FEASIBILITY_TOL) -> bool:
        u = np.asarray(u, dtype=np.float64)
        return bool(np.all(np.abs(u) <= self.radius + tol))

    def huber_total(self, v: np.ndarray) -> float:
        """Sum of Huber penalties, the conjugate q* evaluated at ``v``."""
        return float(np.sum(huber(v, self.radius)))

    def bregman(self, u: np.ndarray, v: np.ndarray, tol: float = FEASIBILITY_TOL) -> float:
        """Penalty value B(u, v); ``inf`` when ``u`` leaves the ball by more than ``tol``.

        Uses the completed-square form

            B(u, v) = ||u - clamp(v)||^2 / 2
                      + sum (|v| - radius)_+ * (radius - u * sign(v)),

        which is algebraically identical to ``q(u) + q*(v) - <u, v>`` on the
        ball, non-negative by construction, and exactly zero at u = clamp(v).
        """
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if not self.contains(u, tol):
            return math.inf
        diff = u - self.project(v)
        outside = np.maximum(np.abs(v) - self.radius, 0.0)
        slack = self.radius - u * np.sign(v)
        return float(0.5 * np.vdot(diff, diff) + np.vdot(outside, slack))

    def bregman_grad_v(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Gradient of B(u, v) in its second argument: ``clamp(v) - u``."""
        return self.project(v) - np.asarray(u, dtype=np.float64)

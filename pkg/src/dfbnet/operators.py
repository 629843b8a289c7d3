"""Multi-channel convolution operators with exact adjoints.

The learnable linear maps of the network are banks of zero-padded 2D
correlation filters, mapping an (H, W) image to a (C, H, W) feature stack
with stride 1 and "same" output size. Forward map, adjoint and the gradient
with respect to the filter weights are all derived from one padded-index
bookkeeping, so the adjoint is exact (up to rounding) for any kernel size.

Squared spectral norms are estimated by power iteration on ``x -> A*(A x)``,
which yields a Rayleigh quotient and therefore never overshoots the true
value.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_POWER_ITERS = 200
DEFAULT_POWER_TOL = 1e-6


class ConvOperator:
    """Bank of C zero-padded correlation filters acting as one linear map.

    Parameters
    ----------
    kernels : array of shape (C, kh, kw)
        Filter weights, one kernel per output channel. Copied and frozen.
    input_shape : (int, int)
        Spatial size (H, W) of the images the operator acts on.

    Notes
    -----
    ``apply`` computes ``y[c, i, j] = sum_{a,b} k[c, a, b] * xpad[i+a, j+b]``
    where ``xpad`` pads x with ``(kh-1)//2`` zeros on top, ``(kw-1)//2`` on
    the left and the complement on the other sides. ``adjoint`` is the exact
    transpose of this indexing. Instances are immutable and safe to share.
    """

    __slots__ = ("kernels", "input_shape", "_pad_top", "_pad_left")

    def __init__(self, kernels, input_shape):
        kernels = np.array(kernels, dtype=np.float64, order="C")
        if kernels.ndim != 3:
            raise ValueError(f"kernels must have shape (C, kh, kw), got {kernels.shape}")
        if not np.all(np.isfinite(kernels)):
            raise ValueError("kernels contain non-finite values")
        h, w = input_shape
        if h < 1 or w < 1:
            raise ValueError(f"invalid input shape {input_shape!r}")
        kernels.setflags(write=False)
        self.kernels = kernels
        self.input_shape = (int(h), int(w))
        self._pad_top = (kernels.shape[1] - 1) // 2
        self._pad_left = (kernels.shape[2] - 1) // 2

    @property
    def channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernels.shape[1], self.kernels.shape[2]

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (self.channels,) + self.input_shape

    def _padded(self, x: np.ndarray) -> np.ndarray:
        kh, kw = self.kernel_size
        pt, pl = self._pad_top, self._pad_left
        return np.pad(x, ((pt, kh - 1 - pt), (pl, kw - 1 - pl)))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Evaluate ``A x`` for an (H, W) image; returns a (C, H, W) stack."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_shape:
            raise ValueError(f"expected image of shape {self.input_shape}, got {x.shape}")
        windows = sliding_window_view(self._padded(x), self.input_shape)
        return np.tensordot(self.kernels, windows, axes=([1, 2], [0, 1]))

    def adjoint(self, u: np.ndarray) -> np.ndarray:
        """Evaluate ``A* u`` for a (C, H, W) stack; returns an (H, W) image."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != self.output_shape:
            raise ValueError(f"expected features of shape {self.output_shape}, got {u.shape}")
        h, w = self.input_shape
        kh, kw = self.kernel_size
        # t[a, b] = sum_c k[c, a, b] * u[c]; scatter back into the padded grid
        t = np.tensordot(self.kernels, u, axes=(0, 0))
        buf = np.zeros((h + kh - 1, w + kw - 1))
        for a in range(kh):
            for b in range(kw):
                buf[a:a + h, b:b + w] += t[a, b]
        pt, pl = self._pad_top, self._pad_left
        return buf[pt:pt + h, pl:pl + w]

    def kernel_grad(self, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Gradient of ``<A x, weights>`` with respect to the kernel entries.

        Returns an array of the same shape as ``kernels``; this is the
        correlation of the padded image with each weight channel.
        """
        x = np.asarray(x, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        if x.shape != self.input_shape:
            raise ValueError(f"expected image of shape {self.input_shape}, got {x.shape}")
        if weights.shape != self.output_shape:
            raise ValueError(
                f"expected features of shape {self.output_shape}, got {weights.shape}")
        windows = sliding_window_view(self._padded(x), self.input_shape)
        return np.tensordot(weights, windows, axes=([1, 2], [2, 3]))

    def with_kernels(self, kernels) -> "ConvOperator":
        """New operator with the same geometry but different weights."""
        return ConvOperator(kernels, self.input_shape)

    def with_input_shape(self, input_shape) -> "ConvOperator":
        """New operator with the same weights on a different image size."""
        return ConvOperator(self.kernels, input_shape)

    def spectral_norm_sq(self, max_iters: int = DEFAULT_POWER_ITERS,
                         tol: float = DEFAULT_POWER_TOL) -> float:
        """Estimate of ``||A||^2`` by power iteration (see `power_iteration`)."""
        value, _ = power_iteration(self, max_iters=max_iters, tol=tol)
        return value


def power_iteration(op: ConvOperator, max_iters: int = DEFAULT_POWER_ITERS,
                    tol: float = DEFAULT_POWER_TOL,
                    v0: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Largest eigenvalue of ``A* A`` and the final iterate.

    Starts from ``v0`` if given, otherwise from a fixed-seed random image, and
    stops once the relative change of the Rayleigh quotient drops below
    ``tol`` or after ``max_iters`` iterations. The returned value is a
    Rayleigh quotient of ``A* A`` and therefore a lower bound on the true
    squared spectral norm. Returning the iterate lets callers warm-start the
    next estimate after a small kernel update.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not np.any(op.kernels):
        return 0.0, np.zeros(op.input_shape)
    v = None
    if v0 is not None:
        v = np.asarray(v0, dtype=np.float64)
        if v.shape != op.input_shape or not np.linalg.norm(v) > 0:
            v = None
    if v is None:
        v = np.random.default_rng(0).standard_normal(op.input_shape)
    v = v / np.linalg.norm(v)
    value = 0.0
    for _ in range(max_iters):
        w = op.adjoint(op.apply(v))
        new_value = float(np.vdot(v, w))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v
        v = w / nw
        if value > 0.0 and abs(new_value - value) <= tol * value:
            value = new_value
            break
        value = new_value
    return value, v

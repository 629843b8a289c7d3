"""Unrolled dual forward-backward denoising network.

The denoiser is obtained by unrolling a fixed number ``K`` of dual
forward-backward iterations for the problem

    min_x  ||x - z||^2 / 2 + radius * ||L x||_1

into network stages, each with its own learnable convolution operator. With
operators ``L_0 .. L_K`` and per-stage steps ``tau_1 .. tau_K``, the forward
pass reads

    u_0 = L_0 z
    u_k = clamp(u_{k-1} - tau_k L_k (L_k* u_{k-1} - z)),   k = 1 .. K-1
    out = z - L_K* u_{K-1}

where clamp is the projection onto the l-infinity ball of the given radius.
The affine inputs to each clamp are exposed separately (`preact_first`,
`preact`, `reconstruct`) because the lifted training objective penalizes the
dual variables against exactly these maps. `dual_fb_solve` runs the classic
iterative scheme to convergence with a single fixed operator; it serves as an
optimization oracle for the unrolled architecture.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .operators import ConvOperator, power_iteration
from .penalties import LinfBall

# Default step-size floor; adapted downward when an operator norm is so large
# that [floor, (2 - floor)/||L||^2] would be empty.
DEFAULT_TAU_FLOOR = 0.1
TAU_SAFETY_FACTOR = 1.8


@dataclass(frozen=True)
class NetParams:
    """Full parameter pack of the unrolled network.

    Fields
    ------
    operators : tuple of K+1 ConvOperator
        Stage operators; all must share input shape and channel count.
    taus : array of K floats
        Step sizes, ``taus[k-1]`` belonging to stage k.
    radius : float
        l-infinity ball radius of the dual constraint (the l1 weight).
    tau_floor : float
        Lower end of the admissible step interval.
    """

    operators: tuple[ConvOperator, ...]
    taus: np.ndarray
    radius: float
    tau_floor: float = DEFAULT_TAU_FLOOR

    def __post_init__(self):
        if len(self.operators) < 3:
            raise ValueError("need at least K+1 = 3 operators (depth K >= 2)")
        object.__setattr__(self, "operators", tuple(self.operators))
        taus = np.asarray(self.taus, dtype=np.float64)
        taus.setflags(write=False)
        object.__setattr__(self, "taus", taus)
        if taus.shape != (self.depth,):
            raise ValueError(f"expected {self.depth} step sizes, got {taus.shape}")
        if not self.radius > 0:
            raise ValueError("radius must be strictly positive")
        if not 0 < self.tau_floor <= 0.2:
            raise ValueError("tau_floor must lie in (0, 0.2]")
        shape = self.operators[0].input_shape
        channels = self.operators[0].channels
        for op in self.operators:
            if op.input_shape != shape or op.channels != channels:
                raise ValueError("all operators must share input shape and channel count")

    @property
    def depth(self) -> int:
        return len(self.operators) - 1

    @property
    def input_shape(self) -> tuple[int, int]:
        return self.operators[0].input_shape

    @property
    def channels(self) -> int:
        return self.operators[0].channels

    @property
    def ball(self) -> LinfBall:
        return LinfBall(self.radius)

    def tau(self, k: int) -> float:
        """Step size of stage k, 1 <= k <= depth."""
        if not 1 <= k <= self.depth:
            raise IndexError(f"stage index {k} out of range 1..{self.depth}")
        return float(self.taus[k - 1])

    def validate_taus(self, norms_sq=None, slack: float = 1e-9):
        """Check every tau against the admissible interval [floor, (2-floor)/||L_k||^2]."""
        for k in range(1, self.depth + 1):
            nsq = self.operators[k].spectral_norm_sq() if norms_sq is None else norms_sq[k]
            tau = self.tau(k)
            hi = (2.0 - self.tau_floor) / nsq if nsq > 0 else np.inf
            if tau < self.tau_floor * (1 - slack) or tau > hi * (1 + slack):
                raise ValueError(
                    f"tau_{k} = {tau:g} outside [{self.tau_floor:g}, {hi:g}]")

    def kernels(self) -> list[np.ndarray]:
        return [op.kernels for op in self.operators]


def refresh_taus(params: NetParams, warm: list[np.ndarray] | None = None,
                 max_iters: int = 200, tol: float = 1e-6):
    """Recompute every step size as ``1.8 / ||L_k||^2``.

    ``warm`` optionally carries the previous power-iteration vectors (one per
    operator, entry 0 unused) to warm-start the estimates after a small
    kernel update. Returns the updated params and the new vectors. When an
    operator norm exceeds (2 - floor)/floor the floor is lowered so the
    admissible interval stays non-empty.
    """
    k_count = params.depth + 1
    if warm is None:
        warm = [None] * k_count
    taus = np.empty(params.depth)
    vecs: list[np.ndarray | None] = [None] * k_count
    for k in range(1, k_count):
        nsq, vec = power_iteration(params.operators[k], max_iters=max_iters,
                                   tol=tol, v0=warm[k])
        vecs[k] = vec
        taus[k - 1] = TAU_SAFETY_FACTOR / nsq if nsq > 0 else 1.0
    floor = min(DEFAULT_TAU_FLOOR, float(taus.min()))
    return replace(params, taus=taus, tau_floor=floor), vecs


def preact_first(params: NetParams, z: np.ndarray) -> np.ndarray:
    """Affine input of the first clamp: ``(Id - tau_1 L_1 L_1*) L_0 z + tau_1 L_1 z``."""
    u0 = params.operators[0].apply(z)
    return _stage_affine(params, 1, u0, z)


def preact(params: NetParams, k: int, u_prev: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Affine input of the clamp at stage k (2 <= k <= K-1)."""
    if not 2 <= k <= params.depth - 1:
        raise IndexError(f"stage index {k} out of range 2..{params.depth - 1}")
    return _stage_affine(params, k, u_prev, z)


def reconstruct(params: NetParams, u_last: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Output image ``z - L_K* u_{K-1}``."""
    return z - params.operators[params.depth].adjoint(u_last)


def _stage_affine_parts(params: NetParams, k: int, u_prev: np.ndarray, z: np.ndarray):
    """Return (a, v) with ``a = L_k* u_prev - z`` and ``v = u_prev - tau_k L_k a``."""
    op = params.operators[k]
    a = op.adjoint(u_prev) - z
    return a, u_prev - params.tau(k) * op.apply(a)


def _stage_affine(params: NetParams, k: int, u_prev: np.ndarray, z: np.ndarray) -> np.ndarray:
    return _stage_affine_parts(params, k, u_prev, z)[1]


def forward(params: NetParams, z: np.ndarray, return_duals: bool = False):
    """Run the unrolled network on a noisy image.

    Returns the denoised image, or ``(image, duals)`` with the K-1
    intermediate dual blocks when ``return_duals`` is set. Every block is a
    clamp output, hence feasible for the ball.
    """
    z = np.asarray(z, dtype=np.float64)
    ball = params.ball
    u = ball.project(preact_first(params, z))
    duals = [u]
    for k in range(2, params.depth):
        u = ball.project(preact(params, k, u, z))
        duals.append(u)
    out = reconstruct(params, u, z)
    if return_duals:
        return out, duals
    return out


def dual_fb_solve(op: ConvOperator, z: np.ndarray, radius: float,
                  max_iters: int = 500, tol: float = 0.0) -> np.ndarray:
    """Solve ``min_x ||x - z||^2 / 2 + radius ||L x||_1`` by dual forward-backward.

    Iterates ``u <- clamp(u - tau L (L* u - z))`` from ``u = 0`` with the
    fixed step ``tau = 1.8 / ||L||^2`` and returns ``z - L* u``. Stops early
    once the relative dual update falls below ``tol``.
    """
    if not radius > 0:
        raise ValueError("radius must be strictly positive")
    z = np.asarray(z, dtype=np.float64)
    ball = LinfBall(radius)
    nsq = op.spectral_norm_sq()
    if nsq == 0.0:
        return z.copy()
    tau = TAU_SAFETY_FACTOR / nsq
    u = np.zeros(op.output_shape)
    for _ in range(max_iters):
        u_next = ball.project(u - tau * op.apply(op.adjoint(u) - z))
        step = np.linalg.norm(u_next - u)
        u = u_next
        if step <= tol * max(np.linalg.norm(u), 1.0):
            break
    return z - op.adjoint(u)

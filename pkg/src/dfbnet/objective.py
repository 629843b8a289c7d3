"""Lifted training objective and its partial gradients.

Instead of composing the network end to end, training lifts the K-1 dual
blocks ``u = (u_1 .. u_{K-1})`` of each sample into optimization variables
and penalizes them against the stage maps with the ball's Bregman penalty:

    E(theta, u | z, xbar) = ||out(u_{K-1}, z) - xbar||^2 / 2
                            + sum_k B(u_k, v_k)

where ``v_1 = preact_first(z)`` and ``v_k = preact(k, u_{k-1}, z)``. The
objective splits as ``E = h + f`` with ``h`` the (proximable) sum of ball
indicators over the blocks and ``f`` everything else; ``f`` is smooth, finite
everywhere, and its gradients with respect to both the dual blocks and the
kernels are available in closed form. Each Bregman term touches only the
operators of its own stage, so the kernel gradient decomposes layer by layer;
only the reconstruction loss reaches the final operator.

All evaluations for one (params, u, sample) triple share a single cache of
the affine stage inputs, and the cache computes them through the very same
functions the forward pass uses, so penalties vanish bit-exactly when ``u``
is set to the forward intermediates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import NetParams, _stage_affine_parts, reconstruct
from .penalties import huber


@dataclass(frozen=True, eq=False)
class SamplePair:
    """One training couple: clean target, noisy input, stable identifier."""

    clean: np.ndarray
    noisy: np.ndarray
    sample_id: str

    def __post_init__(self):
        clean = np.asarray(self.clean, dtype=np.float64)
        noisy = np.asarray(self.noisy, dtype=np.float64)
        if clean.shape != noisy.shape:
            raise ValueError("clean and noisy images must share a shape")
        object.__setattr__(self, "clean", clean)
        object.__setattr__(self, "noisy", noisy)


@dataclass
class ObjectiveBreakdown:
    """Value of E split into the reconstruction loss and the penalty terms."""

    total: float
    loss_term: float
    penalty_terms: np.ndarray

    @property
    def feasible(self) -> bool:
        return np.isfinite(self.total)


@dataclass
class _StageCache:
    """Shared per-(params, u, sample) intermediate quantities.

    ``v[i]`` is the affine input of stage i+1, ``a[i]`` the image-space
    residual ``L_k* w_{k-1} - z`` feeding it, ``w[i]`` the stage input block
    (``L_0 z`` for the first stage, ``u_{k-1}`` after), ``r[i]`` the prox
    residual ``clamp(v) - u``. ``out`` is the reconstruction.
    """

    v: list = field(default_factory=list)
    a: list = field(default_factory=list)
    w: list = field(default_factory=list)
    r: list = field(default_factory=list)
    out: np.ndarray | None = None


def _build_cache(params: NetParams, u_blocks, sample: SamplePair) -> _StageCache:
    depth = params.depth
    if len(u_blocks) != depth - 1:
        raise ValueError(f"expected {depth - 1} dual blocks, got {len(u_blocks)}")
    z = sample.noisy
    ball = params.ball
    cache = _StageCache()
    w = params.operators[0].apply(z)
    for k in range(1, depth):
        a, v = _stage_affine_parts(params, k, w, z)
        cache.w.append(w)
        cache.a.append(a)
        cache.v.append(v)
        cache.r.append(ball.project(v) - u_blocks[k - 1])
        w = u_blocks[k - 1]
    cache.out = reconstruct(params, u_blocks[-1], z)
    return cache


def objective_terms(params: NetParams, u_blocks, sample: SamplePair) -> ObjectiveBreakdown:
    """Evaluate E with its loss/penalty breakdown.

    Dual blocks outside the ball (beyond the feasibility tolerance) make the
    total infinite; the loss term is still reported.
    """
    cache = _build_cache(params, u_blocks, sample)
    ball = params.ball
    loss = 0.5 * float(np.vdot(cache.out - sample.clean, cache.out - sample.clean))
    penalties = np.array([ball.bregman(u_blocks[k], cache.v[k])
                          for k in range(params.depth - 1)])
    return ObjectiveBreakdown(total=loss + float(np.sum(penalties)),
                              loss_term=loss, penalty_terms=penalties)


def smooth_objective(params: NetParams, u_blocks, sample: SamplePair) -> float:
    """The smooth part f of the lifted objective (finite for any u)."""
    value, _, _ = _evaluate(params, u_blocks, sample, need_theta=False, need_u=False)
    return value


def smooth_grad_u(params: NetParams, u_blocks, sample: SamplePair) -> list[np.ndarray]:
    """Gradient of f with respect to every dual block."""
    _, _, grads = _evaluate(params, u_blocks, sample, need_theta=False, need_u=True)
    return grads


def smooth_grad_kernels(params: NetParams, u_blocks, sample: SamplePair) -> list[np.ndarray]:
    """Gradient of f with respect to every operator's kernels (taus frozen)."""
    _, grads, _ = _evaluate(params, u_blocks, sample, need_theta=True, need_u=False)
    return grads


def smooth_value_and_grads(params: NetParams, u_blocks, sample: SamplePair,
                           need_theta: bool = True, need_u: bool = True):
    """One-pass evaluation of f and the requested gradients (shared cache)."""
    return _evaluate(params, u_blocks, sample, need_theta, need_u)


def _evaluate(params: NetParams, u_blocks, sample: SamplePair,
              need_theta: bool, need_u: bool):
    cache = _build_cache(params, u_blocks, sample)
    depth = params.depth
    radius = params.radius
    z, xbar = sample.noisy, sample.clean
    err = cache.out - xbar

    value = 0.5 * float(np.vdot(err, err))
    for k in range(1, depth):
        u = u_blocks[k - 1]
        v = cache.v[k - 1]
        value += 0.5 * float(np.vdot(u, u)) + float(np.sum(huber(v, radius))) \
            - float(np.vdot(u, v))

    grads_theta = None
    if need_theta:
        grads_theta = []
        # first operator: reached only through w_0 = L_0 z inside v_1
        op1 = params.operators[1]
        m1r1 = cache.r[0] - params.tau(1) * op1.apply(op1.adjoint(cache.r[0]))
        grads_theta.append(params.operators[0].kernel_grad(z, m1r1))
        # stage operators: each Bregman term is local to its stage
        for k in range(1, depth):
            op = params.operators[k]
            rk = cache.r[k - 1]
            g = op.kernel_grad(cache.a[k - 1], rk) + op.kernel_grad(op.adjoint(rk),
                                                                    cache.w[k - 1])
            grads_theta.append(-params.tau(k) * g)
        # final operator: reached only through the reconstruction loss
        grads_theta.append(-params.operators[depth].kernel_grad(err, u_blocks[-1]))

    grads_u = None
    if need_u:
        grads_u = []
        for k in range(1, depth):
            g = u_blocks[k - 1] - cache.v[k - 1]
            if k < depth - 1:
                # coupling through v_{k+1} = M u_k + const, M self-adjoint
                op_next = params.operators[k + 1]
                r_next = cache.r[k]
                g = g + r_next - params.tau(k + 1) * op_next.apply(op_next.adjoint(r_next))
            else:
                # coupling through the reconstruction loss
                g = g - params.operators[depth].apply(err)
            grads_u.append(g)
    return value, grads_theta, grads_u

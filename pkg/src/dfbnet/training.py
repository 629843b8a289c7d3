"""Training loops: lifted block-coordinate forward-backward and an SGD baseline.

The lifted trainer alternates, once per mini-batch, a gradient step on the
kernels and a projected gradient step on the per-sample dual blocks:

    theta <- theta - beta * grad_theta f(u, theta | batch)
    u     <- clamp(u - gamma * grad_u f(u, theta' | batch))

Both step sizes are chosen by two-way backtracking: a proposal is accepted
only if the quadratic majorant inequality

    f(new) <= f(old) + <new - old, grad f(old)> + ||new - old||^2 / (2 step)

holds on the batch objective, shrinking the step on failure and growing it
after every acceptance. Accepted steps therefore never increase f. Step sizes
are validated against the refreshed operator norms: every kernel proposal is
evaluated with its own recomputed ``tau_k = 1.8 / ||L_k||^2``, so the
inequality certifies descent of the objective actually used afterwards.

The baseline minimizes the batch-mean end-to-end loss by explicit
reverse-mode differentiation through the unrolled network, using the 0/1
clamp mask as the activation derivative, with plain (momentum-free) gradient
descent at a fixed learning rate.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .network import NetParams, forward, refresh_taus, _stage_affine_parts, reconstruct
from .objective import SamplePair, objective_terms, smooth_value_and_grads
from .operators import ConvOperator

STEP_CAP = 1e6

SGD_LR_GRID = (1e-6, 5e-6, 1e-5, 5e-5, 1e-4, 5e-4)


@dataclass
class TrainConfig:
    """Knobs of one training run."""

    epochs: int = 50
    batch_size: int = 10
    beta0: float = 1.0
    gamma0: float = 1.0
    backtrack_up: float = 2.0
    backtrack_down: float = 0.5
    max_backtracks: int = 30
    seed: int = 0
    algorithm: str = "lb-fb"
    sgd_lr: float = 1e-4
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.backtrack_up > 1:
            raise ValueError("backtrack_up must be > 1")
        if not 0 < self.backtrack_down < 1:
            raise ValueError("backtrack_down must be in (0, 1)")
        if self.algorithm not in ("lb-fb", "sgd"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class TrainState:
    """Mutable state of a run: parameters, per-sample dual blocks, step sizes."""

    params: NetParams
    config: TrainConfig
    aux: dict = field(default_factory=dict)
    beta: float = 1.0
    gamma: float = 1.0
    epoch: int = 0
    rng: np.random.Generator = None
    power_vecs: list = None
    pool: ThreadPoolExecutor | None = None


@dataclass
class StepDiagnostics:
    """What one mini-batch step did, including the accepted majorant checks."""

    f_before: float
    f_after_theta: float
    f_after: float
    theta_accepted: bool = False
    u_accepted: bool = False
    theta_backtracks: int = 0
    u_backtracks: int = 0
    theta_majorant: tuple = (np.nan, np.nan)
    u_majorant: tuple = (np.nan, np.nan)
    theta_stalled: bool = False
    u_stalled: bool = False
    beta: float = np.nan
    gamma: float = np.nan


@dataclass
class EpochRecord:
    epoch: int
    algorithm: str
    loss_l2: float
    loss_E: float | None
    beta: float | None
    gamma: float | None
    lr: float | None
    backtracks: int
    seconds: float


def glorot_kernels(count: int, channels: int, kernel_size: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform(-a, a) filter banks with a = sqrt(6 / (fan_in + fan_out)).

    fan_in counts the kernel taps times the single input channel, fan_out the
    taps times the output channels.
    """
    fan_in = kernel_size * kernel_size
    fan_out = kernel_size * kernel_size * channels
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return [rng.uniform(-a, a, size=(channels, kernel_size, kernel_size))
            for _ in range(count)]


def init_params(shape, depth: int, channels: int = 16, kernel_size: int = 3,
                seed: int = 0, radius: float = 0.1) -> NetParams:
    """Seeded network initialization with refreshed step sizes."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    kernels = glorot_kernels(depth + 1, channels, kernel_size, rng)
    ops = tuple(ConvOperator(k, shape) for k in kernels)
    params = NetParams(operators=ops, taus=np.ones(depth), radius=radius)
    params, _ = refresh_taus(params)
    return params


def init_aux(params: NetParams, sample: SamplePair) -> list[np.ndarray]:
    """Dual blocks initialized to the forward-pass intermediates.

    This makes every Bregman penalty start at exactly zero, so the lifted
    objective initially equals the end-to-end loss.
    """
    _, duals = forward(params, sample.noisy, return_duals=True)
    return duals


def init_state(config: TrainConfig, dataset_samples,
               params: NetParams | None = None) -> TrainState:
    """Build the starting state: seeded parameters, duals, shuffle generator."""
    samples = list(dataset_samples)
    if not samples:
        raise ValueError("dataset is empty")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    shape = samples[0].noisy.shape
    if params is None:
        params = init_params(shape, depth=5, seed=config.seed)
    elif params.input_shape != shape:
        raise ValueError(f"params expect shape {params.input_shape}, data is {shape}")
    shuffle_seq = np.random.SeedSequence((config.seed, 1))
    state = TrainState(params=params, config=config,
                       beta=config.beta0, gamma=config.gamma0,
                       rng=np.random.default_rng(shuffle_seq))
    if config.algorithm == "lb-fb":
        state.aux = {s.sample_id: init_aux(params, s) for s in samples}
    if config.threads > 1:
        state.pool = ThreadPoolExecutor(max_workers=config.threads)
    return state


def _batch_map(state: TrainState, fn, batch):
    """Apply fn to every sample; results always in batch (sample-id) order."""
    if state.pool is not None:
        return list(state.pool.map(fn, batch))
    return [fn(s) for s in batch]


def _sum_kernel_grads(grads_per_sample):
    total = [np.array(g) for g in grads_per_sample[0]]
    for grads in grads_per_sample[1:]:
        for t, g in zip(total, grads):
            t += g
    return total


def _with_kernels(params: NetParams, kernels) -> NetParams:
    ops = tuple(op.with_kernels(k) for op, k in zip(params.operators, kernels))
    return replace(params, operators=ops)


def lbfb_step(state: TrainState, batch) -> StepDiagnostics:
    """One alternating step on a mini-batch; mutates ``state`` in place.

    The batch objective is the sum of the smooth parts over the batch.
    Gradients and reductions run in ascending sample-id order. On exhausted
    backtracking the corresponding block is left unchanged and the stall is
    reported in the diagnostics.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    batch = sorted(batch, key=lambda s: s.sample_id)
    for s in batch:
        if s.sample_id not in state.aux:
            raise KeyError(f"no stored dual blocks for sample {s.sample_id!r}")
    cfg = state.config
    params = state.params
    aux = [state.aux[s.sample_id] for s in batch]

    # kernel stage: batch-summed gradient, then backtracked proposal
    evals = _batch_map(state, lambda s: smooth_value_and_grads(
        params, state.aux[s.sample_id], s, need_theta=True, need_u=False), batch)
    f_before = float(sum(v for v, _, _ in evals))
    grad_theta = _sum_kernel_grads([g for _, g, _ in evals])
    grad_norm_sq = float(sum(np.vdot(g, g) for g in grad_theta))

    diag = StepDiagnostics(f_before=f_before, f_after_theta=f_before, f_after=f_before)
    beta = state.beta
    candidate = params
    cand_vecs = state.power_vecs
    if grad_norm_sq == 0.0:
        # exact fixed point of the kernel block: the zero proposal is accepted
        # as-is (no kernel change, so no step-size refresh either)
        diag.theta_accepted = True
        diag.theta_majorant = (f_before, f_before)
    else:
        for _ in range(cfg.max_backtracks + 1):
            kernels = [op.kernels - beta * g for op, g in zip(params.operators, grad_theta)]
            trial, vecs = refresh_taus(_with_kernels(params, kernels), warm=state.power_vecs)
            f_trial = float(sum(_batch_map(state, lambda s: smooth_value_and_grads(
                trial, state.aux[s.sample_id], s, need_theta=False, need_u=False)[0],
                batch)))
            rhs = f_before - beta * grad_norm_sq + 0.5 * beta * grad_norm_sq
            if f_trial <= rhs:
                diag.theta_accepted = True
                diag.theta_majorant = (f_trial, rhs)
                diag.f_after_theta = f_trial
                candidate, cand_vecs = trial, vecs
                break
            beta *= cfg.backtrack_down
            diag.theta_backtracks += 1
    if diag.theta_accepted:
        state.params = candidate
        state.power_vecs = cand_vecs
        state.beta = min(beta * cfg.backtrack_up, STEP_CAP)
    else:
        diag.theta_stalled = True
        state.beta = beta
    diag.beta = beta
    params = state.params

    # dual stage: per-sample gradients at the new kernels, shared step size
    evals = _batch_map(state, lambda s: smooth_value_and_grads(
        params, state.aux[s.sample_id], s, need_theta=False, need_u=True), batch)
    f_theta = float(sum(v for v, _, _ in evals))
    grads_u = [g for _, _, g in evals]
    diag.f_after_theta = f_theta
    diag.f_after = f_theta

    ball = params.ball
    gamma = state.gamma
    for _ in range(cfg.max_backtracks + 1):
        proposal = [[ball.project(u - gamma * g) for u, g in zip(blocks, grads)]
                    for blocks, grads in zip(aux, grads_u)]
        f_trial = float(sum(_batch_map(state, lambda pair: smooth_value_and_grads(
            params, pair[1], pair[0], need_theta=False, need_u=False)[0],
            list(zip(batch, proposal)))))
        inner = sum(float(np.vdot(p - u, g))
                    for blocks, grads, props in zip(aux, grads_u, proposal)
                    for u, g, p in zip(blocks, grads, props))
        dist_sq = sum(float(np.vdot(p - u, p - u))
                      for blocks, props in zip(aux, proposal)
                      for u, p in zip(blocks, props))
        rhs = f_theta + inner + dist_sq / (2.0 * gamma)
        if f_trial <= rhs:
            diag.u_accepted = True
            diag.u_majorant = (f_trial, rhs)
            diag.f_after = f_trial
            for s, props in zip(batch, proposal):
                state.aux[s.sample_id] = props
            break
        gamma *= cfg.backtrack_down
        diag.u_backtracks += 1
    if diag.u_accepted:
        state.gamma = min(gamma * cfg.backtrack_up, STEP_CAP)
    else:
        diag.u_stalled = True
        state.gamma = gamma
    diag.gamma = gamma
    return diag


def network_loss_and_kernel_grad(params: NetParams, sample: SamplePair):
    """End-to-end loss of the unrolled network and its kernel gradient.

    Reverse-mode pass through the forward recursion; the clamp derivative is
    the indicator of strictly non-saturated components (ties count as
    saturated). Step sizes are treated as constants.
    """
    z, xbar = sample.noisy, sample.clean
    depth = params.depth
    radius = params.radius
    ball = params.ball

    w_list, a_list, v_list, u_list = [], [], [], []
    w = params.operators[0].apply(z)
    for k in range(1, depth):
        a, v = _stage_affine_parts(params, k, w, z)
        u = ball.project(v)
        w_list.append(w)
        a_list.append(a)
        v_list.append(v)
        u_list.append(u)
        w = u
    out = reconstruct(params, u_list[-1], z)
    err = out - xbar
    loss = 0.5 * float(np.vdot(err, err))

    grads = [None] * (depth + 1)
    grads[depth] = -params.operators[depth].kernel_grad(err, u_list[-1])
    gu = -params.operators[depth].apply(err)
    for k in range(depth - 1, 0, -1):
        op = params.operators[k]
        sk = np.where(np.abs(v_list[k - 1]) < radius, gu, 0.0)
        grads[k] = -params.tau(k) * (op.kernel_grad(a_list[k - 1], sk)
                                     + op.kernel_grad(op.adjoint(sk), w_list[k - 1]))
        gu = sk - params.tau(k) * op.apply(op.adjoint(sk))
    grads[0] = params.operators[0].kernel_grad(z, gu)
    return loss, grads


def sgd_step(state: TrainState, batch) -> StepDiagnostics:
    """Plain gradient step on the batch-mean end-to-end loss."""
    if not batch:
        raise ValueError("batch must be non-empty")
    batch = sorted(batch, key=lambda s: s.sample_id)
    results = _batch_map(state, lambda s: network_loss_and_kernel_grad(state.params, s),
                         batch)
    loss = float(sum(l for l, _ in results)) / len(batch)
    grads = _sum_kernel_grads([g for _, g in results])
    lr = state.config.sgd_lr / len(batch)
    kernels = [op.kernels - lr * g for op, g in zip(state.params.operators, grads)]
    state.params, state.power_vecs = refresh_taus(
        _with_kernels(state.params, kernels), warm=state.power_vecs)
    return StepDiagnostics(f_before=loss, f_after_theta=loss, f_after=loss)


def network_loss(params: NetParams, samples) -> float:
    """Mean end-to-end loss over a sample collection."""
    return float(np.mean([0.5 * np.sum((forward(params, s.noisy) - s.clean) ** 2)
                          for s in samples]))


def lifted_loss(params: NetParams, aux: dict, samples) -> float:
    """Mean lifted objective over a sample collection with stored duals."""
    return float(np.mean([objective_terms(params, aux[s.sample_id], s).total
                          for s in samples]))


def train(config: TrainConfig, samples, params: NetParams | None = None,
          on_epoch=None, on_step=None) -> tuple[TrainState, list[EpochRecord]]:
    """Run the configured algorithm over the dataset.

    ``samples`` is a sequence of `SamplePair`. Each epoch reshuffles the
    sample order with the seeded generator, walks consecutive batches (the
    last one may be short), and appends one `EpochRecord`. ``on_epoch`` is
    called with (state, record) after each epoch, e.g. to write logs and
    checkpoints; ``on_step`` with each step's diagnostics.
    """
    samples = list(samples)
    state = init_state(config, samples, params)
    records = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = state.rng.permutation(len(samples))
        epoch_backtracks = 0
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            if config.algorithm == "lb-fb":
                diag = lbfb_step(state, batch)
                epoch_backtracks += diag.theta_backtracks + diag.u_backtracks
            else:
                diag = sgd_step(state, batch)
            if on_step is not None:
                on_step(diag)
        state.epoch = epoch
        seconds = time.perf_counter() - t0
        if config.algorithm == "lb-fb":
            record = EpochRecord(
                epoch=epoch, algorithm=config.algorithm,
                loss_l2=network_loss(state.params, samples),
                loss_E=lifted_loss(state.params, state.aux, samples),
                beta=state.beta, gamma=state.gamma, lr=None,
                backtracks=epoch_backtracks, seconds=seconds)
        else:
            record = EpochRecord(
                epoch=epoch, algorithm=config.algorithm,
                loss_l2=network_loss(state.params, samples),
                loss_E=None, beta=None, gamma=None, lr=config.sgd_lr,
                backtracks=0, seconds=seconds)
        records.append(record)
        if on_epoch is not None:
            on_epoch(state, record)
    if state.pool is not None:
        state.pool.shutdown()
        state.pool = None
    return state, records

"""Loss, schedules, warmup and the optimization loop."""
import csv
import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .geometry import fixed_radius_neighbors
from .network import init_params
from .reference_sph import sph_density
from .simulator import SimulationConfig, SimulationDiverged, step, step_backward

log = logging.getLogger(__name__)

FULL_BUDGET = 50_000


class OptimizerError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Training recipe. Breakpoints are absolute iteration numbers."""

    iterations: int = FULL_BUDGET
    batch_size: int = 2
    lr: float = 1e-3
    lr_decay_start: int = 20_000
    lr_decay_every: int = 5_000
    rollout_steps: tuple = (3, 5)
    rollout_switch: int = 15_000
    warmup_start: int = 10_000
    warmup_max: int = 5
    warmup_double_at: tuple = (20_000, 30_000)
    noise_ratio: float = 0.1
    density_threshold: float = 0.05
    density_support: float = 4.0
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        self.rollout_steps = tuple(int(t) for t in self.rollout_steps)
        self.warmup_double_at = tuple(int(t) for t in self.warmup_double_at)
        self.validate()

    def validate(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.lr_decay_every <= 0:
            raise ValueError("lr and lr_decay_every must be positive")
        if len(self.rollout_steps) != 2 or min(self.rollout_steps) < 1:
            raise ValueError("rollout_steps needs two positive entries")
        if list(self.warmup_double_at) != sorted(self.warmup_double_at):
            raise ValueError("warmup_double_at must be ascending")
        if self.noise_ratio < 0 or self.density_threshold < 0 or self.warmup_max < 0:
            raise ValueError("noise_ratio, density_threshold and warmup_max must be non-negative")
        return self

    @classmethod
    def scaled(cls, iterations, **overrides):
        """Recipe for a reduced budget: every breakpoint shrinks by ``iterations / 50000``.

        ``warmup_max`` keeps its value; it counts simulation steps, not
        iterations.
        """
        f = iterations / FULL_BUDGET
        base = cls()

        def s(v):
            return max(1, int(round(v * f)))

        kw = dict(
            iterations=iterations,
            lr_decay_start=s(base.lr_decay_start),
            lr_decay_every=s(base.lr_decay_every),
            rollout_switch=s(base.rollout_switch),
            warmup_start=s(base.warmup_start),
            warmup_double_at=tuple(s(v) for v in base.warmup_double_at),
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def lr_schedule(iteration, config):
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if iteration < config.lr_decay_start:
        return config.lr
    halvings = (iteration - config.lr_decay_start) // config.lr_decay_every + 1
    return config.lr * 0.5**halvings


def rollout_schedule(iteration, config):
    return config.rollout_steps[1] if iteration >= config.rollout_switch else config.rollout_steps[0]


def warmup_schedule(iteration, config):
    """``W_max`` in effect at ``iteration`` (0 before warmup starts)."""
    if iteration < config.warmup_start:
        return 0
    doublings = sum(iteration >= b for b in config.warmup_double_at)
    return config.warmup_max * 2**doublings


def neighbor_counts(points, radius):
    nl = fixed_radius_neighbors(points, points, radius)
    return nl.counts() - 1


def _frame_weights(pred, radius):
    c = neighbor_counts(pred, radius).astype(float)
    c_avg = c.mean() if len(c) else 0.0
    if c_avg == 0:
        return np.ones_like(c)
    return np.exp(-c / c_avg)


def loss_frame(pred, target, radius, return_grad=False):
    """Neighbor-weighted mean absolute position error over the given particles.

    Each particle's L1 error is weighted by ``exp(-c_i / c_avg)`` where
    ``c_i`` counts the other predicted particles within ``radius``.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.ndim == 1:
        pred, target = pred[:, None], target[:, None]
    if pred.shape != target.shape:
        raise ValueError(f"particle mismatch: {pred.shape} vs {target.shape}")
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = len(pred)
    if n == 0:
        return (0.0, np.zeros_like(pred)) if return_grad else 0.0
    w = _frame_weights(pred, radius)
    diff = pred - target
    value = float(np.sum(w * np.abs(diff).sum(axis=1)) / n)
    if return_grad:
        return value, w[:, None] * np.sign(diff) / n
    return value


def rollout_loss(pred_frames, target_frames, radius, return_grad=False):
    """Mean of :func:`loss_frame` over paired frames."""
    if len(pred_frames) != len(target_frames):
        raise ValueError("frame count mismatch")
    if len(pred_frames) == 0:
        raise ValueError("need at least one frame")
    T = len(pred_frames)
    out = [loss_frame(p, t, radius, return_grad=True) for p, t in zip(pred_frames, target_frames)]
    value = sum(v for v, _ in out) / T
    if return_grad:
        return value, [g / T for _, g in out]
    return value


def add_noise(state, std, rng):
    """Gaussian noise on fluid positions only."""
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return state.copy()
    pos = state.positions.copy()
    fluid = state.fluid
    pos[fluid] += rng.normal(0.0, std, size=(int(fluid.sum()), state.d))
    return state.copy(positions=pos)


def max_fluid_density(state, h):
    rho = sph_density(state.positions, state.masses, h)
    fluid = state.fluid
    return float(rho[fluid].max()) if fluid.any() else 0.0


def warmup(scene, start, params, arch, steps, threshold, kernel_gain=1.0, h=None, trace=None):
    """Run ``steps`` network steps from ground-truth frame ``start`` without gradients.

    After each step the density indicator ``E = |1 - max rho(x) / max rho(y)|``
    against the matching ground-truth frame is checked; once it exceeds
    ``threshold`` the last acceptable state is returned. Returns
    ``(state, index)`` where ``index`` is the frame the state corresponds to.
    ``trace`` (a list) receives every computed ``E``.
    """
    state = scene.state(start)
    index = start
    if steps <= 0:
        return state, index
    sim = SimulationConfig(scene.dt, scene.gravity, scene.particle_radius)
    h = 4.0 * scene.particle_radius if h is None else h
    for w in range(1, steps + 1):
        nxt = step(state, params, arch, sim, kernel_gain)
        if not nxt.is_finite():
            break
        ref = max_fluid_density(scene.state(start + w), h)
        e = abs(1.0 - max_fluid_density(nxt, h) / ref) if ref > 0 else np.inf
        if trace is not None:
            trace.append(e)
        if e > threshold:
            break
        state, index = nxt, start + w
    return state, index


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, opt, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam. Returns new params; ``opt`` is updated in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for {k}")
    opt.t += 1
    c1 = 1.0 - beta1**opt.t
    c2 = 1.0 - beta2**opt.t
    new = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        opt.m[k] = beta1 * opt.m[k] + (1 - beta1) * g
        opt.v[k] = beta2 * opt.v[k] + (1 - beta2) * g * g
        new[k] = p - lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + eps)
    return new


def sample_loss_and_grads(scene, start, params, arch, T, noise_std=0.0, rng=None, state=None,
                          kernel_gain=1.0):
    """Rollout loss of ``T`` steps from ``state`` (default: frame ``start``) and its gradient.

    Returns ``(loss, grads)``.
    """
    sim = SimulationConfig(scene.dt, scene.gravity, scene.particle_radius)
    state = scene.state(start) if state is None else state
    if noise_std > 0:
        state = add_noise(state, noise_std, rng)
    tapes, preds = [], []
    for t in range(T):
        state, tape = step(state, params, arch, sim, kernel_gain, record=True)
        if not state.is_finite():
            raise SimulationDiverged(t + 1)
        tapes.append(tape)
        preds.append(state)
    fluid = scene.fluid
    targets = [scene.positions[start + t + 1][fluid] for t in range(T)]
    loss, g_frames = rollout_loss([p.positions[fluid] for p in preds], targets, arch.radius, return_grad=True)
    n, d = scene.n_particles, scene.d
    gp = np.zeros((n, d))
    gv = np.zeros((n, d))
    total = {k: np.zeros_like(p) for k, p in params.items()}
    for t in reversed(range(T)):
        gp[fluid] += g_frames[t]
        gp, gv, grads = step_backward(tapes[t], params, gp, gv)
        for k, g in grads.items():
            total[k] += g
    return loss, total


def _pick(rng, dataset, T, W_max):
    scene = dataset[int(rng.integers(len(dataset)))]
    W = int(rng.integers(W_max)) if W_max > 0 else 0
    last = scene.n_frames - 1 - T
    if last < 0:
        raise ValueError(f"scene {scene.name} is too short for a rollout of {T}")
    start = int(rng.integers(last + 1))
    W = min(W, last - start)
    return scene, start, W


LOG_FIELDS = ("iteration", "lr", "T", "W_max", "loss", "wall_time")


def train(dataset, arch, config, params=None, log_path=None, checkpoint=None, kernel_gain=1.0, on_log=None):
    """Optimize ``params`` (default: fresh init from ``config.seed``) on ``dataset``.

    Returns ``(params, log)`` where ``log`` is a list of dicts with the
    fields of :data:`LOG_FIELDS`. ``checkpoint(params, iteration)`` is called
    every ``config.checkpoint_every`` iterations when given.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    params = init_params(arch, config.seed) if params is None else {k: v.copy() for k, v in params.items()}
    opt = OptimizerState.zeros_like(params)
    noise_std = config.noise_ratio * arch.particle_radius
    h = config.density_support * arch.particle_radius
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    t0 = time.perf_counter()
    running = []
    try:
        for it in range(config.iterations):
            T = rollout_schedule(it, config)
            W_max = warmup_schedule(it, config)
            lr = lr_schedule(it, config)
            batch_grads, batch_loss = [], []
            for _ in range(config.batch_size):
                scene, start, W = _pick(rng, dataset, T, W_max)
                try:
                    state, s = warmup(scene, start, params, arch, W, config.density_threshold, kernel_gain, h)
                    loss, grads = sample_loss_and_grads(scene, s, params, arch, T, noise_std, rng, state,
                                                        kernel_gain)
                except (SimulationDiverged, ValueError) as exc:
                    log.warning("iteration %d: sample skipped (%s)", it, exc)
                    continue
                batch_grads.append(grads)
                batch_loss.append(loss)
            if batch_grads:
                mean = {k: sum(g[k] for g in batch_grads) / len(batch_grads) for k in params}
                try:
                    params = adam_step(params, mean, opt, lr)
                except OptimizerError as exc:
                    log.warning("iteration %d: update skipped (%s)", it, exc)
                running.extend(batch_loss)
            if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
                row = dict(iteration=it + 1, lr=lr, T=T, W_max=W_max,
                           loss=float(np.mean(running)) if running else float("nan"),
                           wall_time=time.perf_counter() - t0)
                running = []
                history.append(row)
                if writer:
                    writer.writerow([row[k] for k in LOG_FIELDS])
                    fh.flush()
                if on_log:
                    on_log(row)
            if checkpoint and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                checkpoint(params, it + 1)
    finally:
        if fh:
            fh.close()
    return params, history

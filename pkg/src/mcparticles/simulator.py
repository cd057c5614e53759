"""Time stepping with a learned position correction.

One step: explicit Euler prediction under the external acceleration, a
network correction of the predicted fluid positions, then a position-based
velocity update.
"""
from dataclasses import dataclass

import numpy as np

from .network import network_backward, network_forward
from .state import BOUNDARY, FLUID, ParticleState  # noqa: F401  (re-exported)


class SimulationDiverged(RuntimeError):
    def __init__(self, step, message="non-finite particle state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class SimulationConfig:
    dt: float
    gravity: np.ndarray
    particle_radius: float = 0.005

    def __post_init__(self):
        self.gravity = np.atleast_1d(np.asarray(self.gravity, dtype=float))
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.particle_radius <= 0:
            raise ValueError("particle_radius must be positive")


def euler_predict(state, config):
    """Provisional state: ``v' = v + dt g``, ``x' = x + dt v'`` on fluid rows."""
    fluid = state.fluid
    g = config.gravity
    vel = state.velocities.copy()
    pos = state.positions.copy()
    vel[fluid] = vel[fluid] + config.dt * g
    pos[fluid] = pos[fluid] + config.dt * vel[fluid]
    acc = np.zeros_like(pos)
    acc[fluid] = g
    return state.copy(positions=pos, velocities=vel, accelerations=acc)


@dataclass
class StepTape:
    cache: object
    fluid: np.ndarray
    dt: float


def step(state, params, arch, config, kernel_gain=1.0, record=False):
    """Advance one time step. With ``record`` returns ``(state, tape)`` for :func:`step_backward`."""
    pred = euler_predict(state, config)
    dx, cache = network_forward(pred, params, arch, config.gravity, kernel_gain)
    fluid = state.fluid
    pos = pred.positions.copy()
    vel = pred.velocities.copy()
    pos[fluid] = pos[fluid] + dx
    # equals (x_new - x_old) / dt, written to avoid cancellation
    vel[fluid] = vel[fluid] + dx / config.dt
    new = pred.copy(positions=pos, velocities=vel)
    if record:
        return new, StepTape(cache, fluid, config.dt)
    return new


def step_backward(tape, params, grad_pos, grad_vel):
    """Adjoint of one :func:`step`.

    ``grad_pos``/``grad_vel`` are ``(N, d)`` cotangents of the new state;
    returns cotangents of the old state and the parameter gradients.
    """
    fluid, dt = tape.fluid, tape.dt
    g_dx = (grad_pos + grad_vel / dt)[fluid]
    grads, g_xp, g_vp = network_backward(g_dx, tape.cache, params)
    g_pred_pos = grad_pos + g_xp
    g_pred_vel = grad_vel + g_vp
    g_pred_pos[~fluid] = 0.0
    g_pred_vel[~fluid] = 0.0
    g_old_vel = g_pred_vel + dt * g_pred_pos
    return g_pred_pos, g_old_vel, grads


def rollout(state0, params, arch, config, steps, kernel_gain=1.0):
    """All states from ``state0`` through ``steps`` network steps (``steps + 1`` frames)."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    frames = [state0]
    state = state0
    for i in range(steps):
        state = step(state, params, arch, config, kernel_gain)
        if not state.is_finite():
            raise SimulationDiverged(i + 1)
        frames.append(state)
    return frames

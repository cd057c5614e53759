"""Reference SPH solvers and the scene generators built on them.

Two solvers share the kernels below:

* an explicit weakly compressible solver (equation of state
  ``p = k * rho0 * (rho / rho0 - 1)``, clamped at zero, symmetric pressure
  and viscosity forces, semi-implicit Euler);
* an iterative solver that relaxes positions until the compressive density
  error drops below a tolerance (coupled Newton projection of the compressed
  particles' density constraints by default, Jacobi sweeps optionally).

Static boundary particles contribute to densities and push on the fluid but
never move. Masses default to 1; the rest density is the density of an
interior particle of the uniform lattice at the rest spacing.
"""
import logging
from dataclasses import dataclass, replace
from math import pi

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .data import Scene, TrajectoryDataset
from .geometry import as_points, fixed_radius_neighbors
from .state import BOUNDARY, FLUID, ParticleState

log = logging.getLogger(__name__)

POLY6 = {1: 35.0 / 32.0, 2: 4.0 / pi, 3: 315.0 / (64.0 * pi)}
SPIKY = {1: 2.0, 2: 10.0 / pi, 3: 15.0 / pi}


class SolverDiverged(RuntimeError):
    pass


@dataclass
class SolverConfig:
    particle_radius: float = 0.005
    support_factor: float = 4.0
    dt_iterative: float = 0.0025
    dt_explicit: float = 0.00025
    stiffness: float = 10.0
    viscosity: float = 1e-4
    tolerance: float = 0.01
    max_iterations: int = 500
    mass: float = 1.0
    omega: float = 1.0
    relaxation: float = 1e-6
    min_iterations: int = 1
    position_tolerance: float = 1e-6
    method: str = "newton"

    @property
    def h(self):
        return self.support_factor * self.particle_radius

    @property
    def spacing(self):
        return 2.0 * self.particle_radius

    def rest_density(self, d):
        return lattice_density(d, self.spacing, self.h, self.mass)


def poly6(r, h, d):
    r = np.asarray(r, dtype=float)
    return np.where(r < h, POLY6[d] / h ** (d + 6) * np.clip(h * h - r * r, 0, None) ** 3, 0.0)


def spiky_grad(diff, h):
    """Gradient of the spiky kernel at offsets ``diff`` (rows), zero at the origin."""
    d = diff.shape[1]
    r = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    mag = np.where((r > 0) & (r < h), -3.0 * SPIKY[d] / h ** (d + 3) * (h - r) ** 2, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r[:, None] > 0, diff / np.where(r > 0, r, 1.0)[:, None], 0.0)
    return mag[:, None] * unit


def lattice_density(d, spacing, h, mass=1.0):
    """Density of an interior particle of the infinite cubic lattice."""
    m = int(np.ceil(h / spacing))
    axes = [np.arange(-m, m + 1) * spacing] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    return float(mass * poly6(np.linalg.norm(grid, axis=1), h, d).sum())


def sph_density(points, masses, h):
    """``rho_i = sum_j m_j W_poly6(|x_i - x_j|, h)`` including the self term."""
    pts = as_points(points)
    masses = np.broadcast_to(np.asarray(masses, dtype=float), (len(pts),))
    nl = fixed_radius_neighbors(pts, pts, h)
    qi, kj = nl.query_index(), nl.indices
    r = np.linalg.norm(pts[kj] - pts[qi], axis=1)
    return np.bincount(qi, masses[kj] * poly6(r, h, pts.shape[1]), minlength=len(pts))


def _pairs(pos, h):
    nl = fixed_radius_neighbors(pos, pos, h)
    i, j = nl.query_index(), nl.indices
    keep = i != j
    return i[keep], j[keep]


def _scatter(idx, vals, n):
    out = np.zeros((n, vals.shape[1]))
    for a in range(vals.shape[1]):
        out[:, a] = np.bincount(idx, vals[:, a], minlength=n)
    return out


def _viscosity_accel(pos, vel, rho, masses, fluid, i, j, cfg):
    d = pos.shape[1]
    ff = fluid[i] & fluid[j]
    i, j = i[ff], j[ff]
    xij = pos[i] - pos[j]
    vij = vel[i] - vel[j]
    grad = spiky_grad(xij, cfg.h)
    coef = (
        2 * (d + 2) * cfg.viscosity * masses[j] / (0.5 * (rho[i] + rho[j]))
        * np.einsum("ij,ij->i", vij, xij) / (np.einsum("ij,ij->i", xij, xij) + 0.01 * cfg.h**2)
    )
    return _scatter(i, coef[:, None] * grad, len(pos))


def _densities(pos, masses, i, j, h):
    d = pos.shape[1]
    r = np.linalg.norm(pos[i] - pos[j], axis=1)
    return masses * poly6(0.0, h, d) + np.bincount(i, masses[j] * poly6(r, h, d), minlength=len(pos))


def explicit_wcsph_step(state, cfg, gravity, dt=None):
    """One explicit weakly compressible step of size ``dt`` (default ``cfg.dt_explicit``)."""
    dt = cfg.dt_explicit if dt is None else dt
    pos, vel, masses = state.positions, state.velocities, state.masses
    n, d = pos.shape
    fluid = state.fluid
    rho0 = cfg.rest_density(d)
    i, j = _pairs(pos, cfg.h)
    rho = _densities(pos, masses, i, j, cfg.h)
    p = np.where(fluid, np.maximum(cfg.stiffness * (rho - rho0), 0.0), 0.0)
    # boundary neighbours mirror the pressure of the fluid particle they push on
    sel = fluid[i]
    i, j = i[sel], j[sel]
    pj_term = np.where(fluid[j], p[j] / rho[j] ** 2, p[i] / rho[i] ** 2)
    grad = spiky_grad(pos[i] - pos[j], cfg.h)
    coef = -masses[j] * (p[i] / rho[i] ** 2 + pj_term)
    acc = _scatter(i, coef[:, None] * grad, n)
    acc += _viscosity_accel(pos, vel, rho, masses, fluid, i, j, cfg)
    acc[fluid] += gravity
    acc[~fluid] = 0.0
    new_vel = vel + dt * acc
    new_pos = pos + dt * new_vel
    new = state.copy(positions=new_pos, velocities=new_vel)
    if not new.is_finite():
        raise SolverDiverged("explicit SPH step produced non-finite values")
    return new


def _jacobi_correction(c, grad, i, j, fluid, eps):
    n = len(c)
    # sum_k |grad_k C_i|^2 over movable k, including k = i
    own = _scatter(i, grad, n)
    nb_sq = np.bincount(i, np.where(fluid[j], np.einsum("ij,ij->i", grad, grad), 0.0), minlength=n)
    lam = np.where(fluid, -c / (nb_sq + np.einsum("ij,ij->i", own, own) + eps), 0.0)
    pair_lam = lam[i] + np.where(fluid[j], lam[j], 0.0)
    dx = _scatter(i, pair_lam[:, None] * grad, n)
    dx[~fluid] = 0.0
    return dx


def _newton_correction(c, grad, i, j, fluid, active, eps):
    """Joint projection of the active constraints: ``(J J^T + eps) lam = -C``, ``dx = J^T lam``.

    ``c`` holds signed density errors; ``active`` masks the constraints being
    enforced as equalities.
    """
    n, d = len(c), grad.shape[1]
    active = np.flatnonzero(active)
    if len(active) == 0:
        return np.zeros((n, d))
    row_of = np.full(n, -1)
    row_of[active] = np.arange(len(active))
    sel = row_of[i] >= 0
    pi, pj, g = i[sel], j[sel], grad[sel]
    rows, cols, vals = [], [], []
    for a in range(d):
        # d C_i / d x_i = sum_j g_ij ; d C_i / d x_j = -g_ij for movable j
        rows += [row_of[pi], row_of[pi][fluid[pj]]]
        cols += [pi * d + a, pj[fluid[pj]] * d + a]
        vals += [g[:, a], -g[fluid[pj], a]]
    jac = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(active), n * d)
    )
    lhs = (jac @ jac.T + eps * sparse.identity(len(active))).tocsc()
    lam = spsolve(lhs, -c[active])
    return np.asarray(jac.T @ np.atleast_1d(lam)).reshape(n, d)


def iterative_column_step(state, cfg, gravity, dt=None, min_iterations=None, return_info=False):
    """One step of the iterative density-relaxation solver.

    Predicts with gravity and viscosity, then repeats relaxation sweeps that
    move compressed fluid particles along the density gradient, weighted by a
    per-particle pressure multiplier, until the largest compressive error
    ``max(rho / rho0 - 1, 0)`` is below ``cfg.tolerance`` and the last sweep
    moved nothing by more than ``cfg.position_tolerance``, or the iteration
    cap is hit (the step is then kept and logged).

    ``cfg.method`` picks the sweep: ``"jacobi"`` updates every multiplier
    independently (``lambda_i = -C_i / sum |grad C_i|^2``), ``"newton"``
    solves the coupled multipliers of the active constraints together. Jacobi
    sweeps converge slowly along long columns, which leaves a residual
    bounce; the Newton sweep lets a resting column settle.
    """
    dt = cfg.dt_iterative if dt is None else dt
    min_iterations = cfg.min_iterations if min_iterations is None else min_iterations
    pos, vel, masses = state.positions, state.velocities, state.masses
    n, d = pos.shape
    fluid = state.fluid
    rho0 = cfg.rest_density(d)
    i, j = _pairs(pos, cfg.h)
    rho = _densities(pos, masses, i, j, cfg.h)
    acc = _viscosity_accel(pos, vel, rho, masses, fluid, i, j, cfg)
    acc[fluid] += gravity
    acc[~fluid] = 0.0
    x = pos + dt * (vel + dt * acc)
    x[~fluid] = pos[~fluid]
    eps = cfg.relaxation / (rho0 * cfg.h) ** 2
    converged = False
    err = 0.0
    iters = 0
    moved = np.inf
    # constraints enter the active set once compressed and stay for the rest
    # of the step; a fixed set keeps the Newton sweeps from cycling
    active = np.zeros(n, dtype=bool)
    while True:
        i, j = _pairs(x, cfg.h)
        signed = np.where(fluid, _densities(x, masses, i, j, cfg.h) / rho0 - 1.0, 0.0)
        c = np.maximum(signed, 0.0)
        active |= c > 0
        err = float(c.max()) if n else 0.0
        if err < cfg.tolerance and iters >= min_iterations and moved <= cfg.position_tolerance:
            converged = True
            break
        if iters == cfg.max_iterations:
            break
        grad = spiky_grad(x[i] - x[j], cfg.h) * (masses[j] / rho0)[:, None]
        if cfg.method == "jacobi":
            dx = _jacobi_correction(c, grad, i, j, fluid, eps)
        else:
            dx = _newton_correction(signed, grad, i, j, fluid, active, eps)
        x = x + cfg.omega * dx
        moved = float(np.abs(dx).max()) * cfg.omega if n else 0.0
        iters += 1
    if not converged:
        log.warning("iterative solver hit the iteration cap (density error %.4g)", err)
    new_vel = np.where(fluid[:, None], (x - pos) / dt, 0.0)
    new = state.copy(positions=x, velocities=new_vel)
    if not new.is_finite():
        raise SolverDiverged("iterative step produced non-finite values")
    if return_info:
        return new, dict(iterations=iters, density_error=err, converged=converged)
    return new


def column_state(n_fluid, cfg, height=0.0):
    """1D stack of ``n_fluid`` particles above a two-particle floor (floor top at 0)."""
    s = cfg.spacing
    fluid = s * (np.arange(1, n_fluid + 1)) + height
    floor = np.array([0.0, -s])
    pos = np.concatenate([fluid, floor])[:, None]
    types = np.array([FLUID] * n_fluid + [BOUNDARY] * 2)
    normals = np.where(types[:, None] == BOUNDARY, 1.0, 0.0)
    return ParticleState(pos, np.zeros_like(pos), types, normals)


def _run(state, stepper, frames, substeps=1):
    states = [state]
    for _ in range(frames):
        for _ in range(substeps):
            state = stepper(state)
        states.append(state)
    return states


def simulate_column(state, cfg, gravity, frames, explicit=False):
    """Frames at the iterative time step; the explicit solver substeps to match it."""
    g = np.atleast_1d(np.asarray(gravity, dtype=float))
    if explicit:
        sub = int(round(cfg.dt_iterative / cfg.dt_explicit))
        return _run(state, lambda s: explicit_wcsph_step(s, cfg, g), frames, sub)
    return _run(state, lambda s: iterative_column_step(s, cfg, g), frames)


def gen_column_dataset(counts=range(1, 41), frames=100, cfg=None, gravity=-9.81, explicit=False):
    cfg = cfg or SolverConfig()
    g = np.array([gravity])
    scenes = []
    for n in counts:
        states = simulate_column(column_state(n, cfg), cfg, g, frames, explicit)
        scenes.append(Scene.from_states(f"column_{n:02d}", states, cfg.dt_iterative, g, cfg.particle_radius,
                                        dict(kind="column", count=n)))
    return TrajectoryDataset(scenes, dict(kind="column", dt=cfg.dt_iterative, frames=frames))


def gen_freefall_dataset(counts=range(1, 6), height=0.01, frames=100, cfg=None, gravity=-9.81, explicit=False):
    cfg = cfg or SolverConfig()
    g = np.array([gravity])
    scenes = []
    for n in counts:
        states = simulate_column(column_state(n, cfg, height), cfg, g, frames, explicit)
        scenes.append(Scene.from_states(f"freefall_{n}", states, cfg.dt_iterative, g, cfg.particle_radius,
                                        dict(kind="freefall", count=n, height=height)))
    return TrajectoryDataset(scenes, dict(kind="freefall", dt=cfg.dt_iterative, frames=frames))


def drop_points(center, drop_radius, spacing):
    m = int(np.ceil(drop_radius / spacing))
    ax = np.arange(-m, m + 1) * spacing
    grid = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    grid = grid[np.linalg.norm(grid, axis=1) <= drop_radius + 1e-12]
    return grid + np.asarray(center, dtype=float)


def drops_state(cfg, drop_radius=0.03, separation=0.1, speed=0.5):
    """Two mirror-symmetric circular drops moving towards each other along x."""
    s = cfg.spacing
    left = drop_points((-separation / 2, 0.0), drop_radius, s)
    right = -left  # point reflection keeps the pair symmetric
    pos = np.concatenate([left, right])
    vel = np.zeros_like(pos)
    vel[: len(left), 0] = speed
    vel[len(left):, 0] = -speed
    types = np.full(len(pos), FLUID)
    return ParticleState(pos, vel, types)


def gen_drops2d_dataset(cfg=None, frames=60, drop_radius=0.03, separation=0.1, speed=0.5,
                        gravities=((0.0, -9.81), (0.0, 0.0))):
    cfg = cfg or SolverConfig()
    sub = int(round(cfg.dt_iterative / cfg.dt_explicit))
    scenes = []
    for g in gravities:
        g = np.asarray(g, dtype=float)
        state = drops_state(cfg, drop_radius, separation, speed)
        states = _run(state, lambda s, g=g: explicit_wcsph_step(s, cfg, g), frames, sub)
        tag = "nograv" if not np.any(g) else "grav"
        scenes.append(Scene.from_states(f"drops_{tag}", states, cfg.dt_iterative, g, cfg.particle_radius,
                                        dict(kind="drops2d", count=len(state.positions) // 2)))
    return TrajectoryDataset(scenes, dict(kind="drops2d", dt=cfg.dt_iterative, frames=frames))


def with_overrides(cfg, **kw):
    return replace(cfg, **kw)

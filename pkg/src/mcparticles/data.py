"""Trajectory containers."""
from dataclasses import dataclass, field

import numpy as np

from .state import FLUID, ParticleState


@dataclass
class Scene:
    """One simulated sequence: ``positions``/``velocities`` are ``(F, N, d)``."""

    name: str
    positions: np.ndarray
    velocities: np.ndarray
    types: np.ndarray
    normals: np.ndarray
    dt: float
    gravity: np.ndarray
    particle_radius: float
    masses: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        self.types = np.asarray(self.types, dtype=np.int8)
        self.normals = np.asarray(self.normals, dtype=float)
        self.gravity = np.atleast_1d(np.asarray(self.gravity, dtype=float))
        if self.masses is None:
            self.masses = np.ones(self.positions.shape[1])
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities must have the same shape")

    @property
    def n_frames(self):
        return self.positions.shape[0]

    @property
    def n_particles(self):
        return self.positions.shape[1]

    @property
    def d(self):
        return self.positions.shape[2]

    @property
    def fluid(self):
        return self.types == FLUID

    def state(self, t):
        acc = np.where(self.fluid[:, None], self.gravity, 0.0)
        return ParticleState(
            self.positions[t].copy(), self.velocities[t].copy(), self.types.copy(),
            self.normals.copy(), acc, self.masses.copy(),
        )

    @classmethod
    def from_states(cls, name, states, dt, gravity, particle_radius, meta=None):
        s0 = states[0]
        return cls(
            name,
            np.stack([s.positions for s in states]),
            np.stack([s.velocities for s in states]),
            s0.types, s0.normals, dt, gravity, particle_radius, s0.masses, dict(meta or {}),
        )


@dataclass
class TrajectoryDataset:
    scenes: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

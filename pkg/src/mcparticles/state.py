"""Particle state container shared by the simulator, network and solvers."""
from dataclasses import dataclass, replace

import numpy as np

FLUID = 0
BOUNDARY = 1
TYPE_NAMES = {FLUID: "fluid", BOUNDARY: "boundary"}


@dataclass
class ParticleState:
    """Positions, velocities and per-particle attributes at one instant.

    Fluid and boundary particles share the arrays; ``types`` tells them
    apart. Boundary rows of ``velocities`` are zero and ``normals`` is zero on
    fluid rows.
    """

    positions: np.ndarray
    velocities: np.ndarray
    types: np.ndarray
    normals: np.ndarray | None = None
    accelerations: np.ndarray | None = None
    masses: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim == 1:
            self.positions = self.positions[:, None]
        n, d = self.positions.shape
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(n, d)
        self.types = np.asarray(self.types, dtype=np.int8).reshape(n)
        bad = ~np.isin(self.types, (FLUID, BOUNDARY))
        if bad.any():
            raise ValueError(f"unknown particle type(s) {np.unique(self.types[bad]).tolist()}")
        self.normals = np.zeros((n, d)) if self.normals is None else np.asarray(self.normals, dtype=float).reshape(n, d)
        if self.accelerations is None:
            self.accelerations = np.zeros((n, d))
        else:
            self.accelerations = np.asarray(self.accelerations, dtype=float).reshape(n, d)
        self.masses = np.ones(n) if self.masses is None else np.asarray(self.masses, dtype=float).reshape(n)

    @property
    def n(self):
        return self.positions.shape[0]

    @property
    def d(self):
        return self.positions.shape[1]

    @property
    def fluid(self):
        return self.types == FLUID

    @property
    def boundary(self):
        return self.types == BOUNDARY

    @property
    def n_fluid(self):
        return int(self.fluid.sum())

    def copy(self, **changes):
        fields = dict(
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            types=self.types.copy(),
            normals=self.normals.copy(),
            accelerations=self.accelerations.copy(),
            masses=self.masses.copy(),
        )
        fields.update(changes)
        return replace(self, **fields)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities)))

    def validate(self):
        if not self.is_finite():
            raise ValueError("state contains non-finite values")
        if np.any(self.velocities[self.boundary] != 0):
            raise ValueError("boundary particles must be at rest")
        nb = self.normals[self.boundary]
        if len(nb) and np.any(np.abs(np.linalg.norm(nb, axis=1) - 1) > 1e-6):
            raise ValueError("boundary normals must have unit length")
        return self

"""Spatial primitives on point sets.

Everything here is a pure function of numpy arrays of shape ``(N, d)`` with
``d`` in {1, 2, 3}.
"""
from dataclasses import dataclass

import numpy as np

GRAVITY_EPS = 1e-12


def as_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[1] not in (1, 2, 3):
        raise ValueError(f"expected an (N, d) array with d in 1..3, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


@dataclass(frozen=True)
class NeighborList:
    """Compressed per-query neighbor lists.

    ``indices[offsets[q]:offsets[q + 1]]`` are the data indices within
    ``radius`` of query ``q``, ascending.
    """

    offsets: np.ndarray
    indices: np.ndarray
    radius: float

    @property
    def num_queries(self):
        return len(self.offsets) - 1

    @property
    def num_pairs(self):
        return len(self.indices)

    def query_index(self):
        """Query index of every pair, aligned with ``indices``."""
        return np.repeat(np.arange(self.num_queries), np.diff(self.offsets))

    def lists(self):
        return [self.indices[a:b].tolist() for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def counts(self):
        return np.diff(self.offsets)


def _cell_keys(cells, lo, extent):
    # row-major flattening of integer cell coordinates into one int64 key
    key = np.zeros(len(cells), dtype=np.int64)
    for a in range(cells.shape[1]):
        key = key * extent[a] + (cells[:, a] - lo[a])
    return key


def fixed_radius_neighbors(data, query, radius):
    """All data points within ``radius`` (inclusive) of each query point.

    Uses a uniform grid with cell size ``radius``; cost is linear in the number
    of points plus the number of returned pairs.
    """
    data = as_points(data)
    query = as_points(query)
    if radius <= 0:
        raise ValueError("radius must be positive")
    if data.shape[1] != query.shape[1]:
        raise ValueError(f"dimension mismatch: data d={data.shape[1]}, query d={query.shape[1]}")
    nq, nd, d = len(query), len(data), data.shape[1]
    if nq == 0 or nd == 0:
        return NeighborList(np.zeros(nq + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), radius)

    dcell = np.floor(data / radius).astype(np.int64)
    qcell = np.floor(query / radius).astype(np.int64)
    lo = np.minimum(dcell.min(0), qcell.min(0)) - 1
    extent = np.maximum(dcell.max(0), qcell.max(0)) + 2 - lo
    dkey = _cell_keys(dcell, lo, extent)
    order = np.argsort(dkey, kind="stable")
    sorted_keys = dkey[order]

    q_parts, k_parts = [], []
    for shift in np.ndindex(*(3,) * d):
        key = _cell_keys(qcell + (np.array(shift) - 1), lo, extent)
        start = np.searchsorted(sorted_keys, key, side="left")
        stop = np.searchsorted(sorted_keys, key, side="right")
        counts = stop - start
        total = counts.sum()
        if total == 0:
            continue
        qi = np.repeat(np.arange(nq), counts)
        base = np.repeat(start - np.cumsum(counts) + counts, counts)
        k_parts.append(order[base + np.arange(total)])
        q_parts.append(qi)
    if not q_parts:
        return NeighborList(np.zeros(nq + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), radius)
    qi = np.concatenate(q_parts)
    ki = np.concatenate(k_parts)
    diff = data[ki] - query[qi]
    keep = np.einsum("ij,ij->i", diff, diff) <= radius * radius
    qi, ki = qi[keep], ki[keep]
    srt = np.lexsort((ki, qi))
    qi, ki = qi[srt], ki[srt]
    offsets = np.zeros(nq + 1, dtype=np.int64)
    np.cumsum(np.bincount(qi, minlength=nq), out=offsets[1:])
    return NeighborList(offsets, ki.astype(np.int64), radius)


def voxel_sample(points, voxel_size, origin=None):
    """Centers of the occupied cells of a regular grid, in lexicographic cell order.

    The grid is anchored at ``origin`` (the coordinate origin by default).
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        d = pts.shape[1] if pts.ndim == 2 else 1
        return np.zeros((0, d))
    pts = as_points(pts)
    origin = np.zeros(pts.shape[1]) if origin is None else np.asarray(origin, dtype=float)
    cells = np.floor((pts - origin) / voxel_size).astype(np.int64)
    uniq = np.unique(cells, axis=0)  # lexicographic rows
    return origin + (uniq + 0.5) * voxel_size


def farthest_point_sample(points, count, rng_seed=0, start=None):
    """Greedy max-min subset of ``count`` points.

    The first point is ``start`` when given, otherwise drawn from
    ``np.random.default_rng(rng_seed)``.
    """
    pts = as_points(points)
    return pts[farthest_point_indices(pts, count, rng_seed, start)]


def farthest_point_indices(points, count, rng_seed=0, start=None):
    pts = as_points(points)
    n = len(pts)
    if not 1 <= count <= n:
        raise ValueError(f"count must lie in [1, {n}], got {count}")
    if start is None:
        start = int(np.random.default_rng(rng_seed).integers(n))
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def _check_q(q):
    q = np.asarray(q, dtype=float)
    if np.any(q < 0):
        raise ValueError("window argument must be non-negative")
    return q


def poly6_window(q):
    q = _check_q(q)
    return np.where(q < 1.0, (1.0 - q * q) ** 3, 0.0)


def peak_window(q):
    q = _check_q(q)
    return np.where(q < 1.0, (1.0 - q) ** 3, 0.0)


def kernel_coords(offset, radius, K):
    """Continuous grid coordinates of ``offset`` in a K-per-axis kernel grid.

    Linear map of [-radius, radius] onto [0, K-1]. Negative components are
    evaluated through their mirror so that ``kernel_coords(-v)`` equals
    ``(K-1) - kernel_coords(v)`` bit for bit.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    if radius <= 0:
        raise ValueError("radius must be positive")
    v = np.asarray(offset, dtype=float)
    half = 0.5 * (K - 1)
    pos = half + half * (np.abs(v) / radius)
    c = np.where(v < 0, (K - 1) - pos, pos)
    return np.clip(c, 0.0, K - 1.0)


def gravity_rotation(gravity):
    """Rotation matrix taking the gravity direction onto the canonical down axis.

    Canonical down is -x in 1D and -y in 2D/3D. Returns the identity for a
    vanishing gravity vector.
    """
    g = np.asarray(gravity, dtype=float).reshape(-1)
    d = len(g)
    if d not in (1, 2, 3):
        raise ValueError("gravity must have 1 to 3 components")
    norm = np.linalg.norm(g)
    if norm < GRAVITY_EPS:
        return np.eye(d)
    u = g / norm
    if d == 1:
        return np.array([[1.0 if u[0] < 0 else -1.0]])
    down = np.zeros(d)
    down[1] = -1.0
    if d == 2:
        # angle from u to down
        cos = u @ down
        sin = u[0] * down[1] - u[1] * down[0]
        return np.array([[cos, -sin], [sin, cos]])
    # Rodrigues rotation of u onto down
    axis = np.cross(u, down)
    s = np.linalg.norm(axis)
    c = u @ down
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])  # 180 degrees about x
    k = axis / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * kx + (1 - c) * (kx @ kx)


def gravity_normalize(vectors, gravity):
    """Rotate row vectors into the gravity-aligned frame.

    Returns ``(rotated, rotation)``; undo with :func:`gravity_denormalize`.
    """
    rot = gravity_rotation(gravity)
    v = np.asarray(vectors, dtype=float)
    return v @ rot.T, rot


def gravity_denormalize(vectors, rotation):
    return np.asarray(vectors, dtype=float) @ rotation

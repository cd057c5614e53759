"""Continuous convolutions on point sets and their antisymmetric variant.

A convolution over a fixed (data, query, radius) configuration is linear in
the features and in the kernel grid. :class:`ConvGeometry` precomputes that
linear structure as a sparse "interpolation matrix" ``S`` of shape
``(n_query * K**d, n_data)``: entry ``(q * K**d + cell, k)`` holds
``window(|x_k - x_q| / radius) * interp_weight(cell; x_k - x_q)``. Then

    cconv(f)[q] = sum_cell (S @ f)[q, cell] @ G[cell]

which is a sparse product followed by one dense matmul. The same structure
gives the adjoints with respect to features, kernel, and point positions.
"""
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy import sparse

from .geometry import as_points, fixed_radius_neighbors

WINDOWS = ("poly6", "peak")


def _mirror_axis(d):
    return 0 if d == 1 else 1


@dataclass
class KernelGrid:
    """Learnable kernel on a ``K**d`` grid: ``values`` has shape ``(K,)*d + (c_in, c_out)``."""

    values: np.ndarray
    radius: float
    window: str = "poly6"
    bias: np.ndarray | None = None

    @property
    def d(self):
        return self.values.ndim - 2

    @property
    def K(self):
        return self.values.shape[0]


@dataclass
class AntisymmetricKernel:
    """Half of an antisymmetric kernel grid.

    ``half_values`` holds the cells whose index along the mirror axis (y, or x
    in 1D) is below ``K/2``; the rest is implied by point reflection and
    negation.
    """

    half_values: np.ndarray
    radius: float
    window: str = "peak"

    @property
    def d(self):
        return self.half_values.ndim - 2

    @property
    def K(self):
        return self.half_values.shape[0] if self.d > 1 else 2 * self.half_values.shape[0]

    def full(self):
        return materialize_antisymmetric(self.half_values)


def half_shape(d, K, c_in, c_out):
    if K % 2:
        raise ValueError(f"antisymmetric kernels need an even grid size, got K={K}")
    shape = [K] * d
    shape[_mirror_axis(d)] = K // 2
    return tuple(shape) + (c_in, c_out)


# flipped to +1 by the self-check's corruption hook
_MIRROR_SIGN = -1.0


def materialize_antisymmetric(half):
    """Full grid from the free half: ``g[idx] = -g[(K-1) - idx]`` for every cell."""
    half = np.asarray(half)
    d = half.ndim - 2
    axis = _mirror_axis(d)
    K = 2 * half.shape[axis]
    if any(half.shape[a] != K for a in range(d) if a != axis):
        raise ValueError(f"inconsistent half-kernel shape {half.shape}")
    mirrored = _MIRROR_SIGN * np.flip(half, axis=tuple(range(d)))
    return np.concatenate([half, mirrored], axis=axis)


def fold_antisymmetric_grad(grad_full):
    """Adjoint of :func:`materialize_antisymmetric`."""
    d = grad_full.ndim - 2
    axis = _mirror_axis(d)
    K = grad_full.shape[axis]
    lower, upper = np.split(grad_full, [K // 2], axis=axis)
    return lower + _MIRROR_SIGN * np.flip(upper, axis=tuple(range(d)))


def window_and_grad(offsets, radius, window):
    """Window weight per offset row and its gradient with respect to the offset."""
    dist = np.sqrt(np.einsum("ij,ij->i", offsets, offsets))
    q = dist / radius
    inside = q < 1.0
    if window == "poly6":
        s = np.where(inside, 1.0 - q * q, 0.0)
        w = s**3
        grad = (-6.0 * s * s / (radius * radius))[:, None] * offsets
    elif window == "peak":
        s = np.where(inside, 1.0 - q, 0.0)
        w = s**3
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(dist > 0, -3.0 * s * s / (radius * np.where(dist > 0, dist, 1.0)), 0.0)
        grad = scale[:, None] * offsets
    else:
        raise ValueError(f"unknown window {window!r}, expected one of {WINDOWS}")
    return w, grad


def interpolation_weights(offsets, radius, K):
    """Multilinear grid interpolation for each offset row.

    Returns ``(cells, weights, dweights)`` with shapes ``(P, 2**d)``,
    ``(P, 2**d)`` and ``(P, 2**d, d)``; ``cells`` are row-major flat indices.
    Negative components are evaluated through their mirror so that ``v`` and
    ``-v`` get the same weights on point-reflected cells, exactly.
    """
    P, d = offsets.shape
    half = 0.5 * (K - 1)
    slope = half / radius
    lo_nodes, w_lo, w_hi = [], [], []
    for a in range(d):
        v = offsets[:, a]
        c = np.minimum(half + half * (np.abs(v) / radius), K - 1.0)
        i0 = np.minimum(np.floor(c), K - 2).astype(np.int64)
        t = np.clip(c - i0, 0.0, 1.0)
        neg = v < 0
        lo_nodes.append(np.where(neg, K - 2 - i0, i0))
        w_lo.append(np.where(neg, t, 1.0 - t))
        w_hi.append(np.where(neg, 1.0 - t, t))
    corners = list(product((0, 1), repeat=d))
    cells = np.empty((P, len(corners)), dtype=np.int64)
    weights = np.empty((P, len(corners)))
    dweights = np.empty((P, len(corners), d))
    for j, bits in enumerate(corners):
        flat = np.zeros(P, dtype=np.int64)
        wt = np.ones(P)
        for a, b in enumerate(bits):
            flat = flat * K + lo_nodes[a] + b
            wt = wt * (w_hi[a] if b else w_lo[a])
        cells[:, j] = flat
        weights[:, j] = wt
        for a in range(d):
            g = np.full(P, slope if bits[a] else -slope)
            for a2, b2 in enumerate(bits):
                if a2 != a:
                    g = g * (w_hi[a2] if b2 else w_lo[a2])
            dweights[:, j, a] = g
    return cells, weights, dweights


@dataclass
class ConvGeometry:
    """Sparse interpolation structure of one (data, query, radius, K, window) configuration."""

    n_data: int
    n_query: int
    d: int
    K: int
    radius: float
    window: str
    pair_query: np.ndarray
    pair_data: np.ndarray
    rows: np.ndarray
    values: np.ndarray
    dvalues: np.ndarray
    matrix: sparse.csr_matrix
    _cast: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, data, query, radius, K, window="poly6", neighbors=None, skip_self=False):
        """``skip_self`` drops the pairs ``(q, q)``; only meaningful when data and query coincide."""
        data = as_points(data)
        query = as_points(query)
        if window not in WINDOWS:
            raise ValueError(f"unknown window {window!r}, expected one of {WINDOWS}")
        if neighbors is None:
            neighbors = fixed_radius_neighbors(data, query, radius)
        elif neighbors.num_queries != len(query):
            raise ValueError("neighbor list does not match the query set")
        d = data.shape[1]
        qi = neighbors.query_index()
        ki = neighbors.indices
        if skip_self:
            keep = qi != ki
            qi, ki = qi[keep], ki[keep]
        offsets = data[ki] - query[qi]
        w, dw = window_and_grad(offsets, radius, window)
        cells, a, da = interpolation_weights(offsets, radius, K)
        n_corner = cells.shape[1]
        values = (a * w[:, None]).reshape(-1)
        dvalues = (da * w[:, None, None] + a[:, :, None] * dw[:, None, :]).reshape(-1, d)
        rows = (qi[:, None] * K**d + cells).reshape(-1)
        cols = np.repeat(ki, n_corner)
        mat = sparse.csr_matrix((values, (rows, cols)), shape=(len(query) * K**d, len(data)))
        return cls(len(data), len(query), d, K, radius, window, qi, ki, rows, values, dvalues, mat)

    @property
    def cells(self):
        return self.K**self.d

    @property
    def corners(self):
        return 2**self.d

    def matrix_as(self, dtype):
        dtype = np.dtype(dtype)
        if dtype == self.matrix.dtype:
            return self.matrix
        if dtype not in self._cast:
            self._cast[dtype] = self.matrix.astype(dtype)
        return self._cast[dtype]

    def row_sums(self, dtype=float):
        key = ("rowsum", np.dtype(dtype))
        if key not in self._cast:
            rs = np.bincount(self.rows, self.values, minlength=self.n_query * self.cells)
            self._cast[key] = rs.astype(dtype)
        return self._cast[key]

    def position_grads(self, grad_values):
        """Scatter per-entry adjoints of ``values`` onto data and query positions."""
        per_pair = (grad_values[:, None] * self.dvalues).reshape(-1, self.corners, self.d).sum(1)
        g_data = np.zeros((self.n_data, self.d))
        g_query = np.zeros((self.n_query, self.d))
        for a in range(self.d):
            g_data[:, a] = np.bincount(self.pair_data, per_pair[:, a], minlength=self.n_data)
            g_query[:, a] = -np.bincount(self.pair_query, per_pair[:, a], minlength=self.n_query)
        return g_data, g_query


@dataclass
class ConvCache:
    geom: ConvGeometry
    features: np.ndarray
    gathered: np.ndarray
    kernel: np.ndarray
    antisymmetric: bool
    has_bias: bool


def _check_kernel(geom, features, kernel):
    if features.ndim != 2 or features.shape[0] != geom.n_data:
        raise ValueError(f"features must have shape ({geom.n_data}, C), got {features.shape}")
    if kernel.shape[: geom.d] != (geom.K,) * geom.d or kernel.ndim != geom.d + 2:
        raise ValueError(f"kernel grid shape {kernel.shape} does not match K={geom.K}, d={geom.d}")
    if kernel.shape[-2] != features.shape[1]:
        raise ValueError(f"kernel expects {kernel.shape[-2]} input channels, features have {features.shape[1]}")


def cconv_apply(features, geom, kernel, bias=None):
    """Continuous convolution over a prebuilt geometry. Returns ``(out, cache)``."""
    _check_kernel(geom, features, kernel)
    c_in, c_out = kernel.shape[-2:]
    gathered = geom.matrix_as(features.dtype) @ features
    out = gathered.reshape(geom.n_query, -1) @ kernel.reshape(-1, c_out)
    if bias is not None:
        out = out + bias
    return out, ConvCache(geom, features, gathered, kernel, False, bias is not None)


def ascc_apply(features, geom, kernel_full):
    """Antisymmetric convolution ``sum_k w (f_x + f_k) G_s(x_k - x)`` on one point set."""
    if geom.n_data != geom.n_query:
        raise ValueError("antisymmetric convolution needs identical data and query sets")
    _check_kernel(geom, features, kernel_full)
    c_in, c_out = kernel_full.shape[-2:]
    n, cells = geom.n_query, geom.cells
    gathered = geom.matrix_as(features.dtype) @ features
    gathered = gathered.reshape(n, cells, c_in)
    gathered += geom.row_sums(features.dtype).reshape(n, cells, 1) * features[:, None, :]
    gathered = gathered.reshape(n * cells, c_in)
    out = gathered.reshape(n, -1) @ kernel_full.reshape(-1, c_out)
    return out, ConvCache(geom, features, gathered, kernel_full, True, False)


@dataclass
class ConvGrads:
    features: np.ndarray
    kernel: np.ndarray
    bias: np.ndarray | None
    data_pos: np.ndarray | None
    query_pos: np.ndarray | None


def conv_backward(grad_out, cache, positions=True):
    """Adjoint of :func:`cconv_apply` / :func:`ascc_apply`.

    The kernel gradient is with respect to the full grid; fold it with
    :func:`fold_antisymmetric_grad` for the antisymmetric layer.
    """
    geom = cache.geom
    if grad_out.shape != (geom.n_query, cache.kernel.shape[-1]):
        raise ValueError(f"cotangent shape {grad_out.shape} does not match the cached forward pass")
    n, cells = geom.n_query, geom.cells
    c_in, c_out = cache.kernel.shape[-2:]
    g_kernel = (cache.gathered.reshape(n, -1).T @ grad_out).reshape(cache.kernel.shape)
    g_bias = grad_out.sum(0) if cache.has_bias else None
    g_gathered = (grad_out @ cache.kernel.reshape(-1, c_out).T).reshape(n * cells, c_in)
    mat = geom.matrix_as(grad_out.dtype)
    g_feat = mat.T @ g_gathered
    f = cache.features
    if cache.antisymmetric:
        g3 = g_gathered.reshape(n, cells, c_in)
        g_feat = g_feat + np.einsum("ncj,nc->nj", g3, geom.row_sums(grad_out.dtype).reshape(n, cells))
    g_data = g_query = None
    if positions:
        partner = f[geom.pair_data]
        if cache.antisymmetric:
            partner = partner + f[geom.pair_query]
        partner = np.repeat(partner, geom.corners, axis=0)
        g_values = np.einsum("ej,ej->e", g_gathered[geom.rows], partner)
        g_data, g_query = geom.position_grads(g_values)
    return ConvGrads(g_feat, g_kernel, g_bias, g_data, g_query)


def cconv_forward(features, data, query, kernel, neighbors=None):
    """One continuous convolution from ``data`` to ``query`` points. Returns ``(out, cache)``."""
    features = np.asarray(features)
    geom = ConvGeometry.build(data, query, kernel.radius, kernel.K, kernel.window, neighbors)
    return cconv_apply(features, geom, kernel.values, kernel.bias)


def cconv_backward(grad_out, cache):
    """Returns ``(grad_features, grad_kernel, grad_bias)``."""
    g = conv_backward(grad_out, cache, positions=False)
    return g.features, g.kernel, g.bias


def ascc_forward(features, points, kernel, neighbors=None, query=None):
    """Antisymmetric continuous convolution of ``features`` living on ``points``.

    Passing a ``query`` set different from ``points`` is a contract violation.
    """
    if query is not None:
        q = as_points(query)
        p = as_points(points)
        if q.shape != p.shape or not np.array_equal(q, p):
            raise ValueError("antisymmetric convolution requires the data and query sets to coincide")
    features = np.asarray(features)
    # self pairs contribute G(0) = 0; dropping them keeps the output free of their rounding
    geom = ConvGeometry.build(points, points, kernel.radius, kernel.K, kernel.window, neighbors, skip_self=True)
    return ascc_apply(features, geom, kernel.full())


def ascc_backward(grad_out, cache):
    """Returns ``(grad_features, grad_half_values)``."""
    g = conv_backward(grad_out, cache, positions=False)
    return g.features, fold_antisymmetric_grad(g.kernel)


def interpolate_kernel(grid, offsets, radius):
    """Grid value ``G(v)`` (no window) at each offset row; shape ``(P, c_in, c_out)``."""
    offsets = as_points(offsets)
    K = grid.shape[0]
    d = offsets.shape[1]
    cells, w, _ = interpolation_weights(offsets, radius, K)
    flat = grid.reshape(K**d, *grid.shape[d:])
    return np.einsum("pc,pcij->pij", w, flat[cells])


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0)

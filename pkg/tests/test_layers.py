import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcparticles import layers
from mcparticles.geometry import peak_window, poly6_window
from mcparticles.layers import (AntisymmetricKernel, ConvGeometry, KernelGrid, ascc_backward, ascc_forward,
                                cconv_backward, cconv_forward, conv_backward, fold_antisymmetric_grad, half_shape,
                                interpolate_kernel, materialize_antisymmetric)
from mcparticles.selfcheck import corrupted_mirror

WINDOW = {"poly6": poly6_window, "peak": peak_window}


def direct_conv(features, data, query, grid, radius, window, antisymmetric=False, bias=None):
    """Pair-by-pair loop: sum_k window * G(x_k - x_q) applied to f_k (or f_q + f_k)."""
    out = np.zeros((len(query), grid.shape[-1]))
    for q, xq in enumerate(query):
        for k, xk in enumerate(data):
            v = xk - xq
            r = np.linalg.norm(v)
            if r >= radius:
                continue
            G = interpolate_kernel(grid, v[None], radius)[0]
            f = features[k] + (features[q] if antisymmetric else 0.0)
            out[q] += WINDOW[window](r / radius) * f @ G
    return out if bias is None else out + bias


def random_setup(rng, d, n=12, c_in=3, c_out=2, K=4, radius=0.4):
    pts = rng.uniform(0, 1, size=(n, d))
    f = rng.normal(size=(n, c_in))
    return pts, f, radius


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("window", ["poly6", "peak"])
def test_cconv_matches_direct_sum(d, window):
    rng = np.random.default_rng(d)
    pts, f, radius = random_setup(rng, d)
    query = rng.uniform(0, 1, size=(7, d))
    grid = KernelGrid(rng.normal(size=(4,) * d + (3, 2)), radius, window, rng.normal(size=2))
    out, _ = cconv_forward(f, pts, query, grid)
    np.testing.assert_allclose(out, direct_conv(f, pts, query, grid.values, radius, window, bias=grid.bias),
                               atol=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_ascc_matches_direct_sum(d):
    rng = np.random.default_rng(10 + d)
    pts, f, radius = random_setup(rng, d)
    kern = AntisymmetricKernel(rng.normal(size=half_shape(d, 4, 3, 2)), radius)
    out, _ = ascc_forward(f, pts, kern)
    np.testing.assert_allclose(out, direct_conv(f, pts, pts, kern.full(), radius, "peak", True), atol=1e-12)


def test_interpolation_hits_grid_nodes():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(5, 5, 1, 1))
    radius = 2.0
    nodes = np.linspace(-radius, radius, 5)
    for i, a in enumerate(nodes):
        for j, b in enumerate(nodes):
            val = interpolate_kernel(grid, [[a, b]], radius)[0, 0, 0]
            assert val == pytest.approx(grid[i, j, 0, 0], abs=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_materialized_grid_is_point_antisymmetric(d):
    half = np.random.default_rng(d).normal(size=half_shape(d, 6, 2, 3))
    full = materialize_antisymmetric(half)
    assert full.shape == (6,) * d + (2, 3)
    np.testing.assert_array_equal(full, -np.flip(full, axis=tuple(range(d))))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_kernel_antisymmetry_exact(d):
    rng = np.random.default_rng(d)
    full = materialize_antisymmetric(rng.normal(size=half_shape(d, 8, 2, 2)))
    v = rng.uniform(-1.3, 1.3, size=(10_000, d))
    s = interpolate_kernel(full, v, 1.0) + interpolate_kernel(full, -v, 1.0)
    assert np.abs(s).max() <= 1e-12
    assert np.abs(interpolate_kernel(full, np.zeros((1, d)), 1.0)).max() <= 1e-12


def test_fold_is_adjoint_of_materialize():
    rng = np.random.default_rng(3)
    for d in (1, 2, 3):
        half = rng.normal(size=half_shape(d, 4, 2, 2))
        g = rng.normal(size=(4,) * d + (2, 2))
        lhs = np.sum(materialize_antisymmetric(half) * g)
        rhs = np.sum(half * fold_antisymmetric_grad(g))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_half_shape_rejects_odd_grid():
    with pytest.raises(ValueError):
        half_shape(2, 5, 1, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 60), st.integers(0, 2**31), st.sampled_from([2, 4, 6, 8]))
def test_ascc_momentum_sum_property(d, n, seed, K):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, size=(n, d))
    f = rng.normal(size=(n, 3))
    kern = AntisymmetricKernel(rng.normal(size=half_shape(d, K, 3, d)), 0.35)
    out, _ = ascc_forward(f, pts, kern)
    assert np.all(np.abs(out.sum(0)) <= 1e-9 * max(np.abs(out).sum(), 1e-300))


def test_ascc_momentum_single_precision():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 1, size=(200, 2))
    f = rng.normal(size=(200, 4)).astype(np.float32)
    kern = AntisymmetricKernel(rng.normal(size=half_shape(2, 8, 4, 2)).astype(np.float32), 0.2)
    out, _ = ascc_forward(f, pts, kern)
    assert out.dtype == np.float32
    assert np.all(np.abs(out.sum(0, dtype=np.float64)) <= 1e-4 * np.abs(out).sum(dtype=np.float64))


def test_ascc_rejects_different_query():
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(5, 2))
    kern = AntisymmetricKernel(np.zeros(half_shape(2, 4, 1, 2)), 0.5)
    with pytest.raises(ValueError):
        ascc_forward(np.ones((5, 1)), pts, kern, query=pts + 0.1)


def test_corrupted_mirror_breaks_momentum():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, size=(30, 2))
    f = rng.normal(size=(30, 2))
    half = rng.normal(size=half_shape(2, 4, 2, 2))
    with corrupted_mirror():
        out, _ = ascc_forward(f, pts, AntisymmetricKernel(half, 0.5))
    assert np.abs(out.sum(0)).max() > 1e-3 * np.abs(out).sum()
    assert layers._MIRROR_SIGN == -1.0


def _fd(fun, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (fun(xp) - fun(xm)) / (2 * eps)
    return g


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("window", ["poly6", "peak"])
def test_cconv_gradients(d, window):
    rng = np.random.default_rng(d)
    data = rng.uniform(0, 1, size=(8, d))
    query = rng.uniform(0, 1, size=(6, d))
    f = rng.normal(size=(8, 2))
    W = rng.normal(size=(4,) * d + (2, 3))
    b = rng.normal(size=3)
    up = rng.normal(size=(6, 3))
    R = 0.6

    def loss(f=f, W=W, b=b, data=data, query=query):
        return np.sum(cconv_forward(f, data, query, KernelGrid(W, R, window, b))[0] * up)

    _, cache = cconv_forward(f, data, query, KernelGrid(W, R, window, b))
    g = conv_backward(up, cache)
    assert _rel(g.features, _fd(lambda x: loss(f=x), f)) < 1e-6
    assert _rel(g.kernel, _fd(lambda x: loss(W=x), W)) < 1e-6
    assert _rel(g.bias, _fd(lambda x: loss(b=x), b)) < 1e-6
    # positions: valid away from the window cut and grid kinks, which random points avoid
    assert _rel(g.data_pos, _fd(lambda x: loss(data=x), data)) < 1e-4
    assert _rel(g.query_pos, _fd(lambda x: loss(query=x), query)) < 1e-4
    gf, gk, gb = cconv_backward(up, cache)
    np.testing.assert_array_equal(gf, g.features)


@pytest.mark.parametrize("d", [1, 2])
def test_ascc_gradients(d):
    rng = np.random.default_rng(7 + d)
    pts = rng.uniform(0, 1, size=(8, d))
    f = rng.normal(size=(8, 2))
    half = rng.normal(size=half_shape(d, 4, 2, d))
    up = rng.normal(size=(8, d))
    R = 0.6

    def loss(f=f, half=half):
        return np.sum(ascc_forward(f, pts, AntisymmetricKernel(half, R))[0] * up)

    _, cache = ascc_forward(f, pts, AntisymmetricKernel(half, R))
    gf, gh = ascc_backward(up, cache)
    assert _rel(gf, _fd(lambda x: loss(f=x), f)) < 1e-6
    assert _rel(gh, _fd(lambda x: loss(half=x), half)) < 1e-6


def test_geometry_checks_shapes():
    g = ConvGeometry.build(np.zeros((3, 2)), np.zeros((2, 2)), 0.5, 4)
    with pytest.raises(ValueError):
        layers.cconv_apply(np.ones((2, 1)), g, np.zeros((4, 4, 1, 1)))
    with pytest.raises(ValueError):
        layers.cconv_apply(np.ones((3, 1)), g, np.zeros((5, 5, 1, 1)))
    with pytest.raises(ValueError):
        ConvGeometry.build(np.zeros((3, 2)), np.zeros((2, 2)), 0.5, 4, window="box")

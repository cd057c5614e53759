"""Fast invariant suite behind ``mcparticles check``."""
from contextlib import contextmanager

import numpy as np

from . import layers
from .layers import AntisymmetricKernel, KernelGrid, ascc_forward, cconv_forward, half_shape, interpolate_kernel
from .metrics import emd_bruteforce, emd_total


@contextmanager
def corrupted_mirror(active=True):
    """Test hook: build antisymmetric kernels with a wrong mirror sign."""
    old = layers._MIRROR_SIGN
    if active:
        layers._MIRROR_SIGN = 1.0
    try:
        yield
    finally:
        layers._MIRROR_SIGN = old


def _random_ascc(rng, d, n, c_in=3, c_out=2, K=4):
    radius = 0.3
    pts = rng.uniform(0, 1, size=(n, d))
    f = rng.normal(size=(n, c_in))
    kern = AntisymmetricKernel(rng.normal(size=half_shape(d, K, c_in, c_out)), radius)
    return pts, f, kern


def check_momentum(rng, trials=40):
    worst = 0.0
    for t in range(trials):
        d = 1 + t % 2
        pts, f, kern = _random_ascc(rng, d, int(rng.integers(2, 80)))
        out, _ = ascc_forward(f, pts, kern)
        scale = np.abs(out).sum()
        if scale > 0:
            worst = max(worst, float(np.abs(out.sum(0)).max() / scale))
    return worst <= 1e-9, f"max |sum| / sum|out| = {worst:.2e}"


def check_antisymmetry(rng, samples=2000):
    worst = 0.0
    for d in (1, 2):
        half = rng.normal(size=half_shape(d, 6, 2, 2))
        full = layers.materialize_antisymmetric(half)
        v = rng.uniform(-1.2, 1.2, size=(samples, d))
        s = interpolate_kernel(full, v, 1.0) + interpolate_kernel(full, -v, 1.0)
        zero = interpolate_kernel(full, np.zeros((1, d)), 1.0)
        worst = max(worst, float(np.abs(s).max()), float(np.abs(zero).max()))
    return worst <= 1e-12, f"max |G(v) + G(-v)| = {worst:.2e}"


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def check_gradients(rng, eps=1e-6):
    worst = 0.0
    for d in (1, 2):
        pts = rng.uniform(0, 1, size=(6, d))
        f = rng.normal(size=(6, 2))
        g_out = rng.normal(size=(6, 2))
        grid = KernelGrid(rng.normal(size=(4,) * d + (2, 2)), 0.7)
        out, cache = cconv_forward(f, pts, pts, grid)
        gf = layers.cconv_backward(g_out, cache)[0]
        fd = np.zeros_like(f)
        for idx in np.ndindex(*f.shape):
            fp, fm = f.copy(), f.copy()
            fp[idx] += eps
            fm[idx] -= eps
            fd[idx] = (np.sum(cconv_forward(fp, pts, pts, grid)[0] * g_out)
                       - np.sum(cconv_forward(fm, pts, pts, grid)[0] * g_out)) / (2 * eps)
        worst = max(worst, _rel(gf, fd))
        kern = AntisymmetricKernel(rng.normal(size=half_shape(d, 4, 2, 2)), 0.7)
        out, cache = ascc_forward(f, pts, kern)
        gh = layers.ascc_backward(g_out, cache)[1]
        fd = np.zeros_like(kern.half_values)
        for idx in np.ndindex(*fd.shape):
            hp, hm = kern.half_values.copy(), kern.half_values.copy()
            hp[idx] += eps
            hm[idx] -= eps
            fd[idx] = (np.sum(ascc_forward(f, pts, AntisymmetricKernel(hp, 0.7))[0] * g_out)
                       - np.sum(ascc_forward(f, pts, AntisymmetricKernel(hm, 0.7))[0] * g_out)) / (2 * eps)
        worst = max(worst, _rel(gh, fd))
    return worst <= 1e-4, f"max relative gradient error = {worst:.2e}"


def check_emd(rng, trials=40):
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 6))
        a = rng.normal(size=(n, 2))
        b = rng.normal(size=(n, 2))
        worst = max(worst, abs(emd_total(a, b) - emd_bruteforce(a, b)))
    return worst <= 1e-9, f"max |hungarian - brute force| = {worst:.2e}"


CHECKS = (
    ("momentum sum", check_momentum),
    ("kernel antisymmetry", check_antisymmetry),
    ("gradient spot checks", check_gradients),
    ("emd oracle", check_emd),
)


def run_checks(seed=0, corrupt_mirror=False):
    """Returns ``[(name, passed, detail), ...]``."""
    results = []
    with corrupted_mirror(corrupt_mirror):
        for name, fn in CHECKS:
            rng = np.random.default_rng(seed)
            try:
                passed, detail = fn(rng)
            except Exception as exc:  # a crash is a failed check, not a crashed command
                passed, detail = False, f"raised {type(exc).__name__}: {exc}"
            results.append((name, bool(passed), detail))
    return results

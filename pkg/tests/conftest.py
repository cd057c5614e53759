import numpy as np
import pytest

from mcparticles.network import ArchitectureConfig, init_params
from mcparticles.state import BOUNDARY, FLUID, ParticleState


def small_arch(d=2, head="ascc", **kw):
    base = dict(branches=2, l1_channels=(4, 3), exchange_channels=(4, 3), exchange_layers=1, merge_channels=5,
                pre_channels=3, kernel_size=4, ascc_kernel_size=4, radius_scale=6.0, output_scale=0.1, head=head)
    base.update(kw)
    return ArchitectureConfig.default(d, **base)


def random_state(rng, d=2, n_fluid=6, n_boundary=3, spread=0.03):
    pos = rng.uniform(0, spread, size=(n_fluid + n_boundary, d))
    vel = np.zeros_like(pos)
    vel[:n_fluid] = rng.normal(0, 0.1, size=(n_fluid, d))
    types = np.array([FLUID] * n_fluid + [BOUNDARY] * n_boundary)
    nrm = np.zeros_like(pos)
    up = rng.normal(size=(n_boundary, d))
    nrm[n_fluid:] = up / np.linalg.norm(up, axis=1, keepdims=True)
    acc = np.zeros_like(pos)
    acc[:n_fluid] = rng.normal(size=d)
    return ParticleState(pos, vel, types, nrm, acc)


def random_params(arch, rng, scale=0.5):
    p = init_params(arch, int(rng.integers(2**31)))
    return {k: v + rng.normal(0, scale * 0.1, size=v.shape) for k, v in p.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

"""One test per acceptance criterion. Each records a PASS/FAIL line that the
terminal summary prints (see conftest.py)."""
import time

import numpy as np
import pytest

from conftest import random_params, random_state, small_arch
from mcparticles import experiments
from mcparticles.data import Scene
from mcparticles.layers import (AntisymmetricKernel, KernelGrid, ascc_backward, ascc_forward, cconv_backward,
                                cconv_forward, half_shape, interpolate_kernel, materialize_antisymmetric)
from mcparticles.metrics import emd_bruteforce, emd_total
from mcparticles.network import ArchitectureConfig, init_params, network_forward
from mcparticles.simulator import SimulationConfig, rollout
from mcparticles.state import ParticleState
from mcparticles.training import (TrainConfig, loss_frame, lr_schedule, rollout_schedule, sample_loss_and_grads,
                                  warmup_schedule)

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, detail


def test_criterion_1_momentum_sum():
    rng = np.random.default_rng(1)
    worst = {np.float64: 0.0, np.float32: 0.0}
    t0 = time.perf_counter()
    for case in range(1000):
        d = 1 + case % 2
        n = int(rng.integers(1, 513))
        c_in, c_out = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        K = int(rng.choice([2, 4, 6, 8]))
        # radius scaled so a typical particle has a few dozen neighbours
        pts = rng.uniform(0, 1, size=(n, d))
        radius = float(rng.uniform(0.5, 2.0) * (30 / max(n, 1)) ** (1 / d))
        half = rng.normal(size=half_shape(d, K, c_in, c_out))
        f = rng.normal(size=(n, c_in))
        for dtype in (np.float64, np.float32):
            out, _ = ascc_forward(f.astype(dtype), pts, AntisymmetricKernel(half.astype(dtype), radius))
            assert out.dtype == dtype
            total = np.abs(out.astype(np.float64)).sum()
            s = np.abs(out.astype(np.float64).sum(0)).max()
            if total > 0:
                worst[dtype] = max(worst[dtype], s / total)
            elif s > 0:
                worst[dtype] = np.inf
    ok = worst[np.float64] <= 1e-9 and worst[np.float32] <= 1e-4
    record(1, ok, f"max |sum|/sum|out|: f64 {worst[np.float64]:.1e} (<= 1e-9), f32 {worst[np.float32]:.1e} "
                  f"(<= 1e-4), {time.perf_counter() - t0:.0f} s")


def test_criterion_2_kernel_antisymmetry():
    rng = np.random.default_rng(2)
    worst = 0.0
    for d in (1, 2, 3):
        full = materialize_antisymmetric(rng.normal(size=half_shape(d, 8, 3, 2)))
        v = rng.uniform(-1.2, 1.2, size=(10_000, d))
        worst = max(worst, np.abs(interpolate_kernel(full, v, 1.0) + interpolate_kernel(full, -v, 1.0)).max())
        worst = max(worst, np.abs(interpolate_kernel(full, np.zeros((1, d)), 1.0)).max())
    record(2, worst <= 1e-12, f"max |G(v) + G(-v)|, |G(0)| = {worst:.1e} (<= 1e-12)")


def _fd(fun, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (fun(xp) - fun(xm)) / (2 * eps)
    return g


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def test_criterion_3_gradients():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    errs = {}
    for d in (1, 2):
        pts = rng.uniform(0, 1, size=(8, d))
        f = rng.normal(size=(8, 2))
        up = rng.normal(size=(8, 2))
        W = rng.normal(size=(4,) * d + (2, 2))
        loss = lambda W_, f_: np.sum(cconv_forward(f_, pts, pts, KernelGrid(W_, 0.6))[0] * up)  # noqa: E731
        _, cache = cconv_forward(f, pts, pts, KernelGrid(W, 0.6))
        gf, gW, _ = cconv_backward(up, cache)
        errs[f"cconv {d}D"] = max(_rel(gf, _fd(lambda x: loss(W, x), f)), _rel(gW, _fd(lambda x: loss(x, f), W)))

        half = rng.normal(size=half_shape(d, 4, 2, 2))
        loss = lambda h_, f_: np.sum(ascc_forward(f_, pts, AntisymmetricKernel(h_, 0.6))[0] * up)  # noqa: E731
        _, cache = ascc_forward(f, pts, AntisymmetricKernel(half, 0.6))
        gf, gh = ascc_backward(up, cache)
        errs[f"ascc {d}D"] = max(_rel(gf, _fd(lambda x: loss(half, x), f)), _rel(gh, _fd(lambda x: loss(x, f), half)))

        pred = rng.uniform(0, 0.05, size=(10, d))
        target = pred + rng.normal(0, 0.005, size=pred.shape)
        _, g = loss_frame(pred, target, 0.02, return_grad=True)
        errs[f"loss_frame {d}D"] = _rel(g, _fd(lambda x: loss_frame(x, target, 0.02), pred, 1e-8))

        arch = small_arch(d)
        params = random_params(arch, rng)
        states = [random_state(rng, d, n_fluid=6, n_boundary=3)]
        for _ in range(2):
            s = states[-1]
            states.append(s.copy(positions=s.positions + np.where(s.fluid[:, None], 1e-3, 0.0)))
        scene = Scene.from_states("fd", states, 0.0025, np.full(d, -9.81), 0.005)
        _, grads = sample_loss_and_grads(scene, 0, params, arch, 2)
        got, want = [], []
        for name in params:
            flat = params[name].reshape(-1)
            for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                pp = {k: v.copy() for k, v in params.items()}
                pm = {k: v.copy() for k, v in params.items()}
                pp[name].reshape(-1)[i] += 1e-6
                pm[name].reshape(-1)[i] -= 1e-6
                want.append((sample_loss_and_grads(scene, 0, pp, arch, 2)[0]
                             - sample_loss_and_grads(scene, 0, pm, arch, 2)[0]) / 2e-6)
                got.append(grads[name].reshape(-1)[i])
        errs[f"rollout T=2 {d}D"] = _rel(np.array(got), np.array(want))
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    record(3, worst <= 1e-4 and elapsed < 60,
           f"max relative FD error {worst:.1e} (<= 1e-4) over {len(errs)} checks in {elapsed:.1f} s (< 60 s)")


def test_criterion_4_emd_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    count = 0
    for n in range(1, 8):
        for _ in range(200):
            d = int(rng.integers(1, 4))
            a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            worst = max(worst, abs(emd_total(a, b) - emd_bruteforce(a, b)))
            count += 1
    record(4, worst <= 1e-9, f"max |hungarian - brute force| = {worst:.1e} over {count} instances, n = 1..7")


@pytest.mark.slow
def test_criterion_5_liquid_column():
    res = experiments.column_experiment(iterations=5000)
    sph_col, sph_ff = res["sph"]
    a_col, a_ff = res["ascc"]
    c_col, c_ff = res["cconv"]
    secs = res["seconds"]["total"]
    checks = dict(a=a_col < sph_col and c_col < sph_col, b=a_ff < 0.5 * c_ff, c=a_ff < sph_ff, time=secs <= 1800)
    table = (f"RMSE x1e-3 column/free fall: SPH {sph_col * 1e3:.3f}/{sph_ff * 1e3:.3f}, "
             f"No-Sym {c_col * 1e3:.3f}/{c_ff * 1e3:.3f}, ASCC {a_col * 1e3:.3f}/{a_ff * 1e3:.3f}; "
             f"{secs / 60:.1f} min")
    flags = " ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items())
    record(5, all(checks.values()), f"{flags}; {table}")


def test_criterion_6_zero_network_ballistics():
    rng = np.random.default_rng(6)
    worst_closed = 0.0
    exact = True
    for d in (1, 2, 3):
        arch = ArchitectureConfig.default(d)
        params = init_params(arch, 6)
        params["head/half"][:] = 0.0
        st = random_state(rng, d, n_fluid=20, n_boundary=6, spread=0.1)
        g = rng.normal(size=d) * 5
        cfg = SimulationConfig(0.0025, g)
        frames = rollout(st, params, arch, cfg, 100)
        f = st.fluid
        x, v = st.positions.copy(), st.velocities.copy()
        for fr in frames[1:]:
            v[f] = v[f] + cfg.dt * g
            x[f] = x[f] + cfg.dt * v[f]
            exact &= np.array_equal(fr.positions, x) and np.array_equal(fr.velocities, v)
        n = np.arange(1, 101)[:, None, None]
        closed = st.positions[f] + n * cfg.dt * st.velocities[f] + cfg.dt**2 * g * n * (n + 1) / 2
        got = np.stack([fr.positions[f] for fr in frames[1:]])
        worst_closed = max(worst_closed, np.abs(got - closed).max())
    record(6, exact and worst_closed <= 1e-12,
           f"bitwise equal to the explicit-Euler recursion: {exact}; max deviation from the closed form "
           f"{worst_closed:.1e} m over 100 steps, d = 1..3")


@pytest.mark.slow
def test_criterion_7_momentum_change_separation():
    rows = experiments.drops_experiment(seeds=(0, 1, 2))
    ascc = max(r["ascc"] / r["scale"] for r in rows)
    cconv = float(np.mean([r["cconv"] / r["scale"] for r in rows]))
    ok = ascc <= 1e-6 and cconv >= 10 * 1e-6
    record(7, ok, f"momentum_change / scale: ASCC max {ascc:.1e} (<= 1e-6), unconstrained seed-mean of medians "
                  f"{cconv:.1e} (>= 1e-5), seeds {[r['seed'] for r in rows]}")


def test_criterion_8_symmetries():
    rng = np.random.default_rng(8)
    worst_t = 0.0
    perm_exact = True
    for k in range(100):
        d = 1 + k % 2
        arch = ArchitectureConfig.default(d, head="ascc" if k % 4 < 2 else "cconv")
        params = random_params(arch, rng)
        st = random_state(rng, d, n_fluid=int(rng.integers(2, 30)), n_boundary=int(rng.integers(0, 8)), spread=0.06)
        g = rng.normal(size=d)
        a, _ = network_forward(st, params, arch, g)
        shift = rng.uniform(-10, 10, size=d)
        b, _ = network_forward(st.copy(positions=st.positions + shift), params, arch, g)
        worst_t = max(worst_t, np.abs(a - b).max() / max(np.abs(a).max(), 1e-30))
        perm = rng.permutation(st.n)
        pst = ParticleState(st.positions[perm], st.velocities[perm], st.types[perm], st.normals[perm],
                            st.accelerations[perm])
        c, _ = network_forward(pst, params, arch, g)
        row = {orig: i for i, orig in enumerate(np.flatnonzero(st.fluid))}
        perm_exact &= np.array_equal(c, a[[row[i] for i in perm[pst.fluid]]])
    record(8, worst_t <= 1e-9 and perm_exact,
           f"translation: max relative change {worst_t:.1e} (<= 1e-9); permutation bitwise equivariant: {perm_exact}")


def test_criterion_9_schedules():
    cfg = TrainConfig()
    lr_points = {0: 1e-3, 19_999: 1e-3, 20_000: 5e-4, 24_999: 5e-4, 25_000: 2.5e-4, 30_000: 1.25e-4,
                 49_999: 1e-3 / 64}
    T_points = {0: 3, 14_999: 3, 15_000: 5, 49_999: 5}
    W_points = {0: 0, 9_999: 0, 10_000: 5, 19_999: 5, 20_000: 10, 29_999: 10, 30_000: 20, 49_999: 20}
    ok = (cfg.iterations == 50_000
          and all(lr_schedule(i, cfg) == v for i, v in lr_points.items())
          and all(rollout_schedule(i, cfg) == v for i, v in T_points.items())
          and all(warmup_schedule(i, cfg) == v for i, v in W_points.items()))
    record(9, ok, "lr halves every 5k from 20k; T 3 -> 5 at 15k; W_max 5 at 10k, 10 at 20k, 20 at 30k")

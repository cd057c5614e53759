import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import jensenshannon

from mcparticles.metrics import (emd, emd_bruteforce, emd_total, evaluate, hungarian, jsd_from_counts, jsd_velocity,
                                 max_density_err, momentum_change, rmse, rmse_series)


def test_rmse():
    p = np.zeros((2, 3, 2))
    t = np.ones((2, 3, 2))
    t[1] *= 3
    assert rmse(p, t) == pytest.approx(np.sqrt(5.0))
    np.testing.assert_allclose(rmse_series(p, t), [1.0, 3.0])
    with pytest.raises(ValueError):
        rmse(p, t[:, :2])


def test_hungarian_known_case():
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    col = hungarian(cost)
    assert cost[np.arange(3), col].sum() == 5.0
    assert sorted(col.tolist()) == [0, 1, 2]


@pytest.mark.parametrize("n", range(1, 8))
def test_emd_equals_brute_force(n):
    rng = np.random.default_rng(n)
    for _ in range(200 if n <= 5 else 30):
        a = rng.normal(size=(n, 2))
        b = rng.normal(size=(n, 2))
        assert abs(emd_total(a, b) - emd_bruteforce(a, b)) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31), st.booleans())
def test_hungarian_matches_scipy(n, seed, integer):
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 5, size=(n, n)).astype(float) if integer else rng.uniform(size=(n, n))
    r, c = linear_sum_assignment(cost)
    col = hungarian(cost)
    assert sorted(col.tolist()) == list(range(n))
    assert cost[np.arange(n), col].sum() == pytest.approx(cost[r, c].sum(), abs=1e-9)


def test_emd_permutation_invariant_and_normalized():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(30, 3))
    assert emd(a, a[rng.permutation(30)]) == pytest.approx(0.0, abs=1e-12)
    b = a + [0.1, 0.0, 0.0]
    assert emd(a, b) == pytest.approx(0.01)
    assert emd_total(a, b) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        emd_total(a, a, cap=10)
    assert emd(np.zeros((0, 2)), np.zeros((0, 2))) == 0.0


def test_jsd_matches_scipy():
    rng = np.random.default_rng(1)
    p = rng.integers(0, 10, size=20)
    q = rng.integers(0, 10, size=20)
    assert jsd_from_counts(p, q) == pytest.approx(jensenshannon(p, q) ** 2, rel=1e-10)


def test_jsd_velocity_bounds():
    v = np.random.default_rng(2).normal(size=(5, 50, 2))
    assert jsd_velocity(v, v) == pytest.approx(0.0, abs=1e-15)
    far = jsd_velocity(v * 0.01, v * 0.01 + 100.0)
    assert far == pytest.approx(np.log(2.0))
    with pytest.raises(ValueError):
        jsd_velocity(v, v, bins=1)


def test_density_error():
    pts = np.stack([np.linspace(0, 0.05, 6)[:, None]] * 3)
    assert max_density_err(pts, pts, 0.02) == 0.0
    squeezed = pts * 0.9
    assert max_density_err(squeezed, pts, 0.02) > 0.0


def test_momentum_change_free_fall_and_forces():
    dt, g = 0.01, np.array([0.0, -9.81])
    v0 = np.random.default_rng(3).normal(size=(7, 2))
    v = np.stack([v0 + k * dt * g for k in range(5)])
    res, summary = momentum_change(v, 1.0, g, dt)
    assert res.shape == (4, 2) and summary < 1e-9
    kick = v.copy()
    kick[2:, 0, 0] += 1.0  # an unbalanced impulse on one particle
    _, s2 = momentum_change(kick, 1.0, g, dt)
    assert s2 == pytest.approx(100.0 / 4)
    with pytest.raises(ValueError):
        momentum_change(v[:1], 1.0, g, dt)


def test_evaluate_report(tmp_path):
    rng = np.random.default_rng(4)
    tp = rng.uniform(0, 0.1, size=(4, 10, 2))
    tv = rng.normal(size=(4, 10, 2))
    rep = evaluate((tp + 0.001, tv), (tp, tv), 0.01, [0.0, -9.81], 0.02)
    assert rep.rmse == pytest.approx(0.001)
    assert rep.emd <= 2e-6 * (1 + 1e-9) and rep.jsd == 0.0
    rep.write_csv(str(tmp_path / "m.csv"))
    rep.write_summary(str(tmp_path / "m.json"))
    data = json.load(open(tmp_path / "m.json"))
    assert set(data) == {"rmse", "emd", "jsd", "max_density_err", "momentum_change"}
    lines = open(tmp_path / "m.csv").read().splitlines()
    assert lines[0].startswith("frame,") and len(lines) == 5

"""Evaluation metrics on particle trajectories.

Frame arguments are arrays of shape ``(F, N, d)`` (or lists of ``(N, d)``
arrays with equal ``N``).
"""
import csv
import json
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .reference_sph import sph_density

EMD_CAP = 512


def _frames(x):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"expected frames of shape (F, N, d), got {arr.shape}")
    return arr


def rmse(pred, target):
    """Root mean squared per-coordinate position error over frames, particles and dims."""
    p, t = _frames(pred), _frames(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def rmse_series(pred, target):
    p, t = _frames(pred), _frames(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return np.sqrt(np.mean((p - t) ** 2, axis=(1, 2)))


def hungarian(cost):
    """Minimum-cost perfect assignment for a square cost matrix.

    Shortest augmenting paths with row/column potentials, O(n^3). Returns
    ``col_of_row``.
    """
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError("cost matrix must be square")
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.int64)  # 1-based; 0 = unassigned
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            # reduced costs of row i0 against every free column
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[row_of_col[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[row_of_col[1:] - 1] = np.arange(n)
    return col_of_row


def _sq_cost(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def emd_total(pred, target, cap=EMD_CAP):
    """Minimum total squared transport ``min_phi sum ||phi(x) - y||^2``."""
    a = np.asarray(pred, dtype=float)
    b = np.asarray(target, dtype=float)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape != b.shape:
        raise ValueError(f"point count mismatch: {a.shape} vs {b.shape}")
    if len(a) > cap:
        raise ValueError(f"{len(a)} points exceed the exact solver cap of {cap}")
    if len(a) == 0:
        return 0.0
    cost = _sq_cost(a, b)
    col = hungarian(cost)
    return float(cost[np.arange(len(a)), col].sum())


def emd(pred, target, cap=EMD_CAP):
    """Optimal squared transport per particle (total / N)."""
    n = len(np.asarray(pred))
    return emd_total(pred, target, cap) / n if n else 0.0


def emd_bruteforce(pred, target):
    """Exhaustive permutation minimum of the total squared cost (small n only)."""
    a = np.asarray(pred, dtype=float)
    b = np.asarray(target, dtype=float)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    cost = _sq_cost(a, b)
    n = len(a)
    best = np.inf
    rows = np.arange(n)
    for perm in permutations(range(n)):
        best = min(best, cost[rows, list(perm)].sum())
    return float(best)


def _speeds(frames):
    v = _frames(frames)
    return np.linalg.norm(v, axis=2).ravel()


def jsd_from_counts(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * (kl(p) + kl(q))


def jsd_velocity(pred_vel, target_vel, bins=64):
    """Jensen-Shannon divergence (nats) between speed histograms on shared bins."""
    if bins < 2:
        raise ValueError("bins must be at least 2")
    a, b = _speeds(pred_vel), _speeds(target_vel)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("need at least one velocity on each side")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    pa, _ = np.histogram(a, edges)
    pb, _ = np.histogram(b, edges)
    return min(max(jsd_from_counts(pa, pb), 0.0), np.log(2.0))


def density_err_series(pred, target, h, masses=1.0, fluid=None):
    p, t = _frames(pred), _frames(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    out = np.empty(len(p))
    for f in range(len(p)):
        rp = sph_density(p[f], masses, h)
        rt = sph_density(t[f], masses, h)
        if fluid is not None:
            rp, rt = rp[fluid], rt[fluid]
        ref = rt.max()
        if ref <= 0:
            raise ValueError("target density is zero")
        out[f] = abs(1.0 - rp.max() / ref)
    return out


def max_density_err(pred, target, h, masses=1.0, fluid=None):
    """Mean over frames of ``|1 - max rho(pred) / max rho(target)|``."""
    return float(density_err_series(pred, target, h, masses, fluid).mean())


def momentum_change(velocities, masses, gravity, dt, fluid=None):
    """Per-frame residual ``sum m a - sum m g`` with ``a = (v[t+1] - v[t]) / dt``.

    Returns ``(residuals (F-1, d), summary)`` with summary the mean residual norm.
    """
    v = _frames(velocities)
    if len(v) < 2:
        raise ValueError("need at least two frames")
    m = np.broadcast_to(np.asarray(masses, dtype=float), (v.shape[1],))
    sel = np.ones(v.shape[1], dtype=bool) if fluid is None else np.asarray(fluid, dtype=bool)
    g = np.broadcast_to(np.asarray(gravity, dtype=float), (v.shape[2],))
    acc = (v[1:, sel] - v[:-1, sel]) / dt
    res = np.einsum("i,fid->fd", m[sel], acc) - m[sel].sum() * g
    return res, float(np.linalg.norm(res, axis=1).mean())


@dataclass
class MetricsReport:
    rmse: float
    emd: float
    jsd: float
    max_density_err: float
    momentum_change: float
    series: dict = field(default_factory=dict)

    SUMMARY_KEYS = ("rmse", "emd", "jsd", "max_density_err", "momentum_change")

    def summary(self):
        return {k: float(getattr(self, k)) for k in self.SUMMARY_KEYS}

    def write_csv(self, path):
        cols = sorted(self.series)
        n = max((len(self.series[c]) for c in cols), default=0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame"] + cols)
            for f in range(n):
                w.writerow([f] + [repr(float(self.series[c][f])) if f < len(self.series[c]) else "" for c in cols])

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(pred, target, dt, gravity, h, masses=1.0, fluid=None, bins=64, emd_cap=EMD_CAP):
    """All metrics between two trajectories given as ``(positions, velocities)`` pairs.

    Position metrics use fluid particles only when ``fluid`` is given.
    Frames are compared one to one; series hold one value per frame
    (momentum residuals per frame transition, padded with the first value).
    """
    pp, pv = _frames(pred[0]), _frames(pred[1])
    tp, tv = _frames(target[0]), _frames(target[1])
    if pp.shape != tp.shape:
        raise ValueError(f"trajectory mismatch: {pp.shape} vs {tp.shape}")
    sel = np.ones(pp.shape[1], dtype=bool) if fluid is None else np.asarray(fluid, dtype=bool)
    m = np.broadcast_to(np.asarray(masses, dtype=float), (pp.shape[1],))
    r_series = rmse_series(pp[:, sel], tp[:, sel])
    e_series = np.array([emd(a[sel], b[sel], emd_cap) for a, b in zip(pp, tp)])
    d_series = density_err_series(pp, tp, h, m, sel)
    j_series = np.array([jsd_velocity(a[sel][None], b[sel][None], bins) for a, b in zip(pv, tv)])
    if len(pv) >= 2:
        res, mom = momentum_change(pv, m, gravity, dt, sel)
        norms = np.linalg.norm(res, axis=1)
        mom_series = np.concatenate([[0.0], norms])
    else:
        mom, mom_series = 0.0, np.zeros(len(pv))
    return MetricsReport(
        rmse=rmse(pp[:, sel], tp[:, sel]),
        emd=float(e_series.mean()),
        jsd=jsd_velocity(pv[:, sel], tv[:, sel], bins),
        max_density_err=float(d_series.mean()),
        momentum_change=mom,
        series=dict(rmse=r_series, emd=e_series, jsd=j_series, max_density_err=d_series,
                    momentum_change=mom_series),
    )

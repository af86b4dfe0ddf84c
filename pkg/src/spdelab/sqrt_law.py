"""Dyadic oscillation counts ``N_n`` and the square-root law.

``N_n(x, c, t)`` counts the scales ``k = 0..n`` at which the oscillation of
``x`` over ``[t - 2^-k, t]`` exceeds ``c 2^{-k/2}``.  Paths are taken to be
flat at ``x_0`` before time 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .flows import FlowField, InversionError, invert_point, inverse_path_1d
from .noise import generate_paths

__all__ = [
    "ResolutionError",
    "OscillationReport",
    "count_oscillations",
    "lookback_oscillations",
    "count_profile",
    "empirical_pi",
    "flow_normalized_counts",
]


class ResolutionError(ValueError):
    pass


def _grid_check(times, n):
    times = np.asarray(times, dtype=float)
    dt = times[1] - times[0]
    ratio = 2.0**-n / dt
    if ratio < 1 - 1e-9 or abs(ratio - round(ratio)) > 1e-9 * ratio:
        raise ResolutionError(
            f"path step {dt:.3g} does not resolve 2^-{n}; refine the path by "
            f"{int(np.ceil(np.log2(dt * 2**n)))} more levels"
        )
    return dt


def count_oscillations(values, times, c, t, n):
    """``N_n`` at a single time ``t`` for a scalar or ``(n_times, dim)`` path."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    times = np.asarray(times, dtype=float)
    dt = _grid_check(times, n)
    i = int(round((t - times[0]) / dt))
    if abs(times[0] + i * dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= i < len(times):
        raise ResolutionError(f"t={t} is not a grid time")
    count = 0
    for k in range(n + 1):
        w = int(round(2.0**-k / dt))
        seg = values[max(0, i - w) : i + 1]
        osc = np.max(seg.max(axis=0) - seg.min(axis=0))
        if osc > c * 2.0 ** (-k / 2):
            count += 1
    return count


def lookback_oscillations(values, n, dt):
    """Array ``(n + 1, n_times)``: oscillation over ``[t - 2^-k, t]`` at every grid time.

    ``values`` is ``(n_times,)`` or ``(n_times, dim)``; vector paths use the
    max over coordinates.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    nt, dim = values.shape
    wmax = int(round(2.0**0 / dt))
    out = np.zeros((n + 1, nt))
    for a in range(dim):
        x = np.concatenate([np.full(wmax, values[0, a]), values[:, a]])
        for k in range(n + 1):
            w = int(round(2.0**-k / dt))
            size = w + 1
            # origin (size-1)//2 turns the centred window into [i - w, i]
            origin = (size - 1) // 2
            mx = maximum_filter1d(x, size, origin=origin, mode="nearest")
            mn = minimum_filter1d(x, size, origin=origin, mode="nearest")
            osc = (mx - mn)[wmax:]
            np.maximum(out[k], osc, out=out[k])
    return out


def count_profile(values, times, c, n, stride=1):
    """``N_n(t)`` at every ``stride``-th grid time."""
    times = np.asarray(times, dtype=float)
    dt = _grid_check(times, n)
    osc = lookback_oscillations(values, n, dt)[:, ::stride]
    thr = c * 2.0 ** (-np.arange(n + 1) / 2)
    return np.sum(osc > thr[:, None], axis=0)


@dataclass
class OscillationReport:
    c: float
    n: int
    t_samples: np.ndarray
    counts: np.ndarray  # (n_paths, n_t)
    ratios: np.ndarray  # sup_t N_n / (n + 1), per path
    meta: dict = field(default_factory=dict)

    @property
    def mean(self):
        return float(np.mean(self.ratios))

    @property
    def q95(self):
        return float(np.quantile(self.ratios, 0.95))

    def summary(self):
        return {
            "c": self.c,
            "n": self.n,
            "n_paths": int(len(self.ratios)),
            "mean": self.mean,
            "q95": self.q95,
            "max": float(np.max(self.ratios)),
            **self.meta,
        }


def empirical_pi(
    seed, stream, n_paths, cs, n, T=1.0, extra_levels=2, batch=16, keep_counts=False, t_probe=None
):
    """Sup-ratio reports for Brownian paths at each threshold in ``cs``.

    The path and the ``t``-grid both live at depth ``n + extra_levels``;
    ``t_probe`` restricts the sup to the listed grid times.
    """
    cs = list(np.atleast_1d(cs))
    L = n + extra_levels
    dt = T / 2**L
    thr = 2.0 ** (-np.arange(n + 1) / 2)
    cols = slice(None) if t_probe is None else np.rint(np.asarray(t_probe) / dt).astype(int)
    ratios = {c: np.empty(n_paths) for c in cs}
    counts = {c: [] for c in cs}
    for a in range(0, n_paths, batch):
        reps = range(a, min(a + batch, n_paths))
        W = generate_paths(seed, stream, 1, L, T, reps)[:, 0, :]
        for j, r in enumerate(reps):
            osc = lookback_oscillations(W[j], n, dt)[:, cols]
            for c in cs:
                N = np.sum(osc > c * thr[:, None], axis=0)
                ratios[c][r] = N.max() / (n + 1)
                if keep_counts:
                    counts[c].append(N)
    times = T * np.arange(2**L + 1) / 2**L
    if t_probe is not None:
        times = times[cols]
    return {
        c: OscillationReport(
            float(c),
            n,
            times,
            np.array(counts[c]) if keep_counts else np.empty((0, 0)),
            ratios[c],
            {"seed": seed, "stream": stream, "level": L},
        )
        for c in cs
    }


def flow_normalized_counts(flow: FlowField, cs, n, probes, refine=True):
    """Counts for ``s -> grad X_t(y) X_s^{-1}(x)``, ``y = X_t^{-1}(x)``, per probe.

    ``probes`` is a list of ``(t, x)``; the flow must be recorded at every step
    of a grid resolving ``2^-n``.  Returns ``(reports, flagged)`` where
    ``reports[c].counts`` has one row and one column per probe and
    ``flagged`` lists probes skipped because the inversion failed.  With
    ``refine=False`` the inverse path is the lattice interpolant only.
    """
    cs = list(np.atleast_1d(cs))
    if len(flow.times) != flow.steps[-1] - flow.start_step + 1:
        raise ValueError("flow must be recorded at every step")
    dt = _grid_check(flow.times, n)
    thr = 2.0 ** (-np.arange(n + 1) / 2)
    counts = {c: [] for c in cs}
    kept, flagged = [], []
    for t, x in probes:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        i = flow.index_of(t)
        try:
            if flow.d == 1:
                ys = inverse_path_1d(flow, x[0], refine=refine)[: i + 1, None]
            else:
                ys = np.stack([invert_point(flow, flow.times[j], x) for j in range(i + 1)])
        except InversionError:
            flagged.append((t, tuple(x)))
            continue
        _, Jt = flow.evaluate(ys[i][None], flow.steps[i])
        path = ys @ Jt[0].T
        osc = lookback_oscillations(path, n, dt)[:, -1]
        for c in cs:
            counts[c].append(int(np.sum(osc > c * thr)))
        kept.append((t, tuple(x)))
    reports = {}
    for c in cs:
        N = np.array(counts[c])
        ratio = N.max() / (n + 1) if len(N) else 0.0
        reports[c] = OscillationReport(
            float(c), n, np.array([p[0] for p in kept]), N[None, :], np.array([ratio]),
            {"probes": kept},
        )
    return reports, flagged

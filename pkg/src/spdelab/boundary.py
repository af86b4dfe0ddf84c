"""Boundary behaviour of solutions: weighted norms, exponent fits, dyadic shells.

Also hosts the Krylov experiment: ``du = u_xx dt + sqrt(2 - lam) u_x dW`` on
the half line (truncated to ``(0, x_max)``) started from a bump.  Because the
noise coefficient is spatially constant, ``u(t, x) = v(t, x + sigma W_t)``
with ``v_t = (lam / 2) v_yy`` on the moving interval
``(sigma W_t, x_max + sigma W_t)``; that equation is solved implicitly for all
paths at once.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import Lattice
from .moving import MovingLattice, solve_moving_interval
from .noise import generate_paths
from .spde import GridSolution, bump

__all__ = [
    "FitError",
    "ExponentFit",
    "ShellProfile",
    "weighted_linf_alpha",
    "weighted_lp_norm",
    "fit_exponent",
    "fit_boundary_exponent",
    "KrylovReport",
    "krylov_threshold",
    "krylov_experiment",
    "bootstrap_ordering",
    "shell_decay_profile",
]


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class ExponentFit:
    t: float
    window: tuple
    alpha: float
    intercept: float
    r2: float
    n_points: int
    flagged: bool = False  # negative values were fitted through |u|


def weighted_linf_alpha(sol: GridSolution, alpha, T0=0.0):
    """``sup |u(t, x)| d(x)^-alpha`` over interior nodes and recorded times ``t >= T0``."""
    d = sol.distance
    inside = d > 0
    rows = sol.times >= T0 - 1e-12
    u = np.abs(sol.values[rows][:, inside])
    return float(np.max(u * d[inside] ** (-float(alpha)))) if u.size else 0.0


def weighted_lp_norm(u, lat: Lattice, p, theta, order=0):
    """``(sum_{i<=order} int |D^i u|^p d^{theta - d + i p} dx)^{1/p}`` by cell quadrature.

    ``u`` holds values at every lattice node (boundary nodes included).  Cell
    values are corner averages, gradients forward differences averaged over
    the cell, and the weight is taken at the cell centre.  Cells whose centre
    lies outside the domain are dropped.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if order not in (0, 1):
        raise ValueError("order must be 0 or 1")
    dim = lat.domain.dim
    h = lat.h
    U = np.asarray(u, dtype=float).reshape(lat.shape)
    nodes = lat.nodes.reshape(lat.shape + (dim,))
    if dim == 1:
        val = 0.5 * (U[1:] + U[:-1])
        grads = [(U[1:] - U[:-1]) / h]
        centre = 0.5 * (nodes[1:] + nodes[:-1])
    else:
        val = 0.25 * (U[1:, 1:] + U[:-1, 1:] + U[1:, :-1] + U[:-1, :-1])
        gx = 0.5 * ((U[1:, 1:] - U[:-1, 1:]) + (U[1:, :-1] - U[:-1, :-1])) / h
        gy = 0.5 * ((U[1:, 1:] - U[1:, :-1]) + (U[:-1, 1:] - U[:-1, :-1])) / h
        grads = [gx, gy]
        centre = 0.25 * (nodes[1:, 1:] + nodes[:-1, 1:] + nodes[1:, :-1] + nodes[:-1, :-1])
    dist = lat.domain.boundary_distance(centre)
    keep = dist > 0
    w = np.where(keep, np.abs(dist), 1.0)
    total = np.sum(np.where(keep, np.abs(val) ** p * w ** (theta - dim), 0.0))
    if order == 1:
        g = np.sqrt(sum(gi**2 for gi in grads))
        total += np.sum(np.where(keep, g**p * w ** (theta - dim + p), 0.0))
    return float((total * h**dim) ** (1.0 / p))


def fit_exponent(dist, values, window, t=float("nan"), min_points=8):
    """Least-squares slope of ``log|u|`` against ``log d`` for ``d`` in ``window``."""
    dist = np.asarray(dist, dtype=float)
    values = np.asarray(values, dtype=float)
    lo, hi = window
    m = (dist >= lo) & (dist <= hi) & (values != 0)
    if m.sum() < min_points:
        raise FitError(f"only {int(m.sum())} usable points in window {window}")
    flagged = bool(np.any(values[m] < 0))
    x, y = np.log(dist[m]), np.log(np.abs(values[m]))
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([slope, icpt])
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return ExponentFit(float(t), (float(lo), float(hi)), float(slope), float(icpt), float(r2), int(m.sum()), flagged)


def fit_boundary_exponent(sol: GridSolution, t, window=None, side="lo"):
    """Boundary exponent of ``sol`` at the recorded time nearest ``t``.

    On an interval ``side`` picks the boundary component (``"lo"`` or
    ``"hi"``); on a disk the single boundary circle is used.  The default
    window is ``[4h, 0.1 diam]``.
    """
    dom = sol.domain
    if window is None:
        window = (4 * sol.h, 0.1 * dom.diam)
    if not (0 < window[0] < window[1] < dom.diam / 2):
        raise FitError(f"window {window} not inside (0, diam/2)")
    i = int(np.argmin(np.abs(sol.times - t)))
    u = sol.values[i]
    d = sol.distance
    if dom.kind == "interval":
        x = sol.nodes[:, 0]
        mid = 0.5 * (dom.lo + dom.hi)
        part = x <= mid if side == "lo" else x > mid
    else:
        part = np.ones(len(d), bool)
    part &= d > 0
    return fit_exponent(d[part], u[part], window, sol.times[i])


# a window [h, 8h] holds 7 or 8 lattice distances depending on where the boundary falls
KRYLOV_MIN_POINTS = 6


def krylov_threshold(lam):
    """``e^{-1 / (2 lam)}``."""
    return float(np.exp(-1.0 / (2.0 * lam)))


@dataclass
class KrylovReport:
    lam: float | None  # None for the sigma = 0 control
    h: float
    level: int
    window: tuple
    sample_times: np.ndarray  # (n_paths,)
    alpha: np.ndarray  # (n_paths,) fitted exponents (nan where the fit failed)
    fits: list
    meta: dict = field(default_factory=dict)

    @property
    def threshold(self):
        return None if self.lam is None else krylov_threshold(self.lam)

    @property
    def median(self):
        return float(np.nanmedian(self.alpha))

    def quantile(self, q):
        return float(np.nanquantile(self.alpha, q))

    def summary(self):
        return {
            "lambda": self.lam,
            "h": self.h,
            "level": self.level,
            "window": list(self.window),
            "n_paths": int(len(self.alpha)),
            "n_failed": int(np.sum(np.isnan(self.alpha))),
            "median_alpha": self.median,
            "q10_alpha": self.quantile(0.1),
            "q25_alpha": self.quantile(0.25),
            "threshold": self.threshold,
            **self.meta,
        }


def _sample_index(W, t_samples, T):
    N = W.shape[1] - 1
    if t_samples == "record":
        # step of the largest value of W over [T/2, T]
        return N // 2 + np.argmax(W[:, N // 2 :], axis=1)
    return np.full(W.shape[0], int(round(float(t_samples) / T * N)))


def _krylov_paths(lam, reps, h, level, t_samples, window, seed, stream, x_max, T, control, psi, fine_level, lookback, batch):
    """Sample times and fitted exponents for the replicas ``reps``.

    Every path is an independent block of the stacked solve, so the result
    for a replica does not depend on which other replicas share the call.
    """
    reps = list(reps)
    P = len(reps)
    N = 2**level
    dt = T / N
    W = generate_paths(seed, stream, 1, level, T, reps)[:, 0, :]
    if control:
        sigma, diff = 0.0, 1.0
    else:
        sigma, diff = np.sqrt(2.0 - lam), lam / 2.0
    refine = fine_level is not None and not control and fine_level > level
    if refine:
        ratio = 2 ** (fine_level - level)
        dtf = dt / ratio
        n0 = np.empty(P, int)
        segs = []
        for a in range(0, P, batch):
            sub = reps[a : a + batch]
            Wf = generate_paths(seed, stream, 1, fine_level, T, sub)[:, 0, :]
            nf = _sample_index(Wf, t_samples, T)
            for j in range(len(sub)):
                p = a + j
                n0[p] = max(0, int(np.floor((nf[j] * dtf - lookback) / dt + 1e-9)))
                segs.append(Wf[j, n0[p] * ratio : nf[j] + 1].copy())
            del Wf
        k = np.array([len(s_) - 1 for s_ in segs])
        sample_t = n0 * dt + k * dtf
    else:
        n0 = _sample_index(W, t_samples, T)
        sample_t = n0 * dt
    stop = int(n0.max())
    left = (sigma * W).T  # (N + 1, P)
    span = x_max + sigma * float((W.max(axis=1) - W.min(axis=1)).max())
    if refine:
        span += sigma * max(float(np.ptp(s_)) for s_ in segs)
    y0 = np.floor(left.min(axis=0) / h) * h - h
    if refine:
        lo_f = np.array([s_.min() for s_ in segs]) * sigma
        y0 = np.minimum(y0, np.floor(lo_f / h) * h - h)
    lat = MovingLattice(y0, h, int(np.ceil(span / h)) + 3)
    v0 = psi(lat.y - left[0][:, None])
    captured = {int(p): v0[p].copy() for p in np.flatnonzero(n0 == 0)}

    def observe(t, v):
        n = int(round(t / dt))
        for p in np.flatnonzero(n0 == n):
            captured[int(p)] = v[p].copy()

    if stop > 0:
        solve_moving_interval(
            lat, left[: stop + 1], left[: stop + 1] + x_max, v0, dt, lambda t, y: diff,
            record_every=stop, observer=observe,
        )
    frames = np.stack([captured[p] for p in range(P)])
    bound = np.array([left[n0[p], p] for p in range(P)])
    if refine:
        K = int(k.max())
        lf = np.empty((K + 1, P))
        for p, s_ in enumerate(segs):
            lf[: K - k[p] + 1, p] = sigma * s_[0]
            lf[K - k[p] + 1 :, p] = sigma * s_[1:]
        idle = (K - k)[:, None]

        def alpha(t, y):
            j = int(round(t / dtf)) - 1
            return np.where(j >= idle, diff, 0.0)

        _, fr = solve_moving_interval(lat, lf, lf + x_max, frames, dtf, alpha, record_every=K)
        frames = fr[-1]
        bound = lf[-1]
    fits, alpha_hat = [], np.full(P, np.nan)
    for p in range(P):
        try:
            f = fit_exponent(lat.y[p] - bound[p], frames[p], window, sample_t[p], KRYLOV_MIN_POINTS)
        except FitError:
            fits.append(None)
            continue
        fits.append(f)
        alpha_hat[p] = f.alpha
    return sample_t, alpha_hat, fits


def krylov_experiment(
    lam,
    h=1 / 512,
    level=14,
    n_paths=50,
    t_samples="record",
    window=None,
    seed=0,
    stream=0,
    x_max=4.0,
    T=1.0,
    control=False,
    psi=bump,
    fine_level=None,
    lookback=1 / 16,
    batch=16,
    workers=1,
):
    """Fitted boundary exponents at the 0-boundary, one sample time per path.

    ``t_samples="record"`` samples each path at the time where ``W`` attains
    its maximum over ``[T/2, T]``; a float samples every path at that time.
    With ``fine_level`` set, the last ``lookback`` time units before each
    sample time are re-run with step ``T 2^-fine_level`` on the refined path
    (the sample time itself is located on the refined path).
    ``control=True`` sets ``sigma = 0`` and ``a = 1`` (the deterministic heat
    equation) on the same sample times.  ``workers > 1`` splits the replicas
    into contiguous groups solved on a thread pool; results are identical.
    The default window ``[h, 8h]`` keeps the fit inside the boundary layer;
    wider windows mostly see the transported interior profile.
    """
    if not control and not 0 < lam < 1:
        raise ValueError("lam must lie in (0, 1)")
    window = (h, 8 * h) if window is None else tuple(window)
    groups = [g for g in np.array_split(np.arange(n_paths), max(1, int(workers))) if len(g)]
    args = (h, level, t_samples, window, seed, stream, x_max, T, control, psi, fine_level, lookback, batch)

    def work(g):
        return _krylov_paths(lam, g, *args)

    if len(groups) > 1:
        with ThreadPoolExecutor(len(groups)) as ex:
            parts = list(ex.map(work, groups))
    else:
        parts = [work(g) for g in groups]
    sample_t = np.concatenate([p[0] for p in parts])
    alpha_hat = np.concatenate([p[1] for p in parts])
    fits = [f for p in parts for f in p[2]]
    refine = fine_level is not None and not control and fine_level > level
    return KrylovReport(
        None if control else float(lam),
        h,
        level,
        window,
        sample_t,
        alpha_hat,
        fits,
        {
            "seed": seed,
            "stream": stream,
            "x_max": x_max,
            "t_samples": str(t_samples),
            "control": control,
            "fine_level": fine_level if refine else None,
            "lookback": lookback if refine else None,
        },
    )


def bootstrap_ordering(low, high, n_boot=2000, seed=0, ceiling=1.0, paired=False):
    """Bootstrap confidence for ``median(low) < median(high) < ceiling``.

    Returns ``(P(median(high) - median(low) > 0), P(median(high) < ceiling))``
    over ``n_boot`` resamples drawn from a Philox generator keyed by ``seed``.
    ``paired=True`` resamples path indices jointly, for ensembles driven by
    the same Brownian paths; pairs with a failed fit on either side are dropped.
    """
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    rng = np.random.Generator(np.random.Philox(seed))
    if paired:
        ok = ~np.isnan(low) & ~np.isnan(high)
        low, high = low[ok], high[ok]
        idx = rng.integers(0, len(low), (n_boot, len(low)))
        ml, mh = np.median(low[idx], axis=1), np.median(high[idx], axis=1)
    else:
        low, high = low[~np.isnan(low)], high[~np.isnan(high)]
        ml = np.median(low[rng.integers(0, len(low), (n_boot, len(low)))], axis=1)
        mh = np.median(high[rng.integers(0, len(high), (n_boot, len(high)))], axis=1)
    return float(np.mean(mh > ml)), float(np.mean(mh < ceiling))


@dataclass
class ShellProfile:
    j: np.ndarray
    M: np.ndarray
    ratio: float  # fitted g in M(j) ~ C g^j
    constant: float
    meta: dict = field(default_factory=dict)

    @property
    def alpha(self):
        return float(-2.0 * np.log2(self.ratio))


def shell_decay_profile(sol: GridSolution, T0, r0, j_range, min_nodes=4):
    """Shell sups ``M(j) = sup{|u(t, x)|: t >= T0 - 2^-j, 0 < d(x) <= r0 2^{-j/2}}``.

    ``j_range`` is truncated at the first shell holding fewer than
    ``min_nodes`` lattice nodes; ``ValueError`` if fewer than two shells
    remain.  The ratio comes from a least-squares fit of ``log M`` on ``j``.
    """
    d = sol.distance
    js, Ms = [], []
    for j in j_range:
        sel = (d > 0) & (d <= r0 * 2.0 ** (-j / 2) * (1 + 1e-12))
        if sel.sum() < min_nodes:
            break
        rows = sol.times >= T0 - 2.0**-j - 1e-12
        js.append(j)
        Ms.append(float(np.max(np.abs(sol.values[rows][:, sel]))))
    if len(js) < 2:
        raise ValueError("fewer than two non-empty shells")
    js, Ms = np.array(js), np.array(Ms)
    if np.any(Ms <= 0):
        return ShellProfile(js, Ms, 0.0, 0.0, {"degenerate": True})
    slope, icpt = np.polyfit(js, np.log(Ms), 1)
    return ShellProfile(js, Ms, float(np.exp(slope)), float(np.exp(icpt)))

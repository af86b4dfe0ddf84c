"""Stochastic flows ``dX = -sigma^k(X) dW^k`` and the coefficients they induce.

The flow is integrated by Euler-Maruyama with the Jacobian carried along by
the variational recursion, which is the exact derivative of the discrete map.
Consequently ``FlowField.evaluate`` can re-integrate arbitrary points and
reproduce the lattice values bit for bit.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .noise import WienerPath
from .spde import CoefficientSet

__all__ = [
    "FlowField",
    "FlowDegeneracyError",
    "InversionError",
    "TransformedCoefficients",
    "ResidualFit",
    "lattice_points",
    "integrate_forward",
    "integrate_point_ensemble",
    "invert_point",
    "inverse_path_1d",
    "transformed_coefficients",
    "sqrt_psd",
    "composition_residual",
    "residual_increments",
    "chaining_terms",
    "residual_increment_exponent",
    "write_flow_csv",
]


class FlowDegeneracyError(RuntimeError):
    def __init__(self, t, x):
        super().__init__(f"Jacobian determinant <= 0 at t={t:.6g}, x={np.round(x, 6).tolist()}")
        self.t = t
        self.x = x


class InversionError(RuntimeError):
    pass


def lattice_points(bounds, h):
    """Regular lattice over ``bounds = [(lo, hi), ...]``; returns ``(points, shape)``."""
    axes = []
    for lo, hi in bounds:
        n = int(round((hi - lo) / h))
        axes.append(lo + h * np.arange(n + 1))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return pts, tuple(len(a) for a in axes)


def _advance(coeffs, X, J, t, dW):
    """One Euler step; ``dW`` is ``(d1,)`` or per point ``(n, d1)``."""
    dW = np.broadcast_to(dW, (X.shape[0], coeffs.d1))
    s = coeffs.eval_sigma(t, X)  # (n, d, d1)
    X_new = X - np.einsum("nik,nk->ni", s, dW)
    if J is None:
        return X_new, None
    ds = coeffs.eval_dsigma(t, X)  # (n, d, d1, d)
    A = np.einsum("nikl,nk->nil", ds, dW)
    return X_new, J - A @ J


def _det(J):
    d = J.shape[-1]
    if d == 1:
        return J[..., 0, 0]
    if d == 2:
        return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    return np.linalg.det(J)


def _det_check(J, t, X):
    det = _det(J)
    bad = ~(det > 0)
    if np.any(bad):
        raise FlowDegeneracyError(t, X[np.flatnonzero(bad)[0]])


@dataclass(frozen=True, eq=False)
class FlowField:
    """Lattice flow with recorded states.

    ``X[i]`` and ``J[i]`` are the flow and its Jacobian at ``times[i]``;
    ``steps[i]`` is the corresponding index on the time grid of depth ``level``.
    """

    coeffs: CoefficientSet
    noise: WienerPath
    level: int
    points: np.ndarray
    times: np.ndarray
    steps: np.ndarray
    X: np.ndarray
    J: np.ndarray
    start_step: int = 0
    lattice_shape: tuple | None = None
    h: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def dt(self):
        return self.noise.T / 2**self.level

    @property
    def diam(self):
        span = self.points.max(axis=0) - self.points.min(axis=0)
        return float(np.linalg.norm(span)) or 1.0

    def index_of(self, t):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a recorded flow time")
        return i

    def hessian(self, i=None):
        """``D_a D_b X^m`` by finite differences of ``J`` over the lattice.

        Shape ``(..., n, d, d, d)`` indexed ``[m, a, b]``.
        """
        if self.lattice_shape is None:
            raise ValueError("second derivatives need a structured lattice")
        J = self.J if i is None else self.J[i : i + 1]
        nt, n, d = J.shape[0], J.shape[1], self.d
        Jg = J.reshape((nt,) + tuple(self.lattice_shape) + (d, d))
        H = np.empty((nt,) + tuple(self.lattice_shape) + (d, d, d))
        for b in range(d):
            H[..., b] = np.gradient(Jg, self.h, axis=1 + b)
        H = H.reshape(nt, n, d, d, d)
        return H if i is None else H[0]

    def evaluate(self, x, step):
        """Re-integrate ``x`` (m, d) up to ``step`` (scalar or per point)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        step = np.broadcast_to(np.asarray(step), (x.shape[0],))
        X = x.copy()
        J = np.broadcast_to(np.eye(self.d), (x.shape[0], self.d, self.d)).copy()
        dW = self.noise.increments(self.level)
        dt = self.dt
        for n in range(self.start_step, int(step.max(initial=self.start_step))):
            live = step > n
            if live.all():
                X, J = _advance(self.coeffs, X, J, n * dt, dW[n])
            elif live.any():
                X[live], J[live] = _advance(self.coeffs, X[live], J[live], n * dt, dW[n])
        return X, J


def integrate_forward(
    coeffs: CoefficientSet,
    noise: WienerPath,
    points,
    level=None,
    start=0.0,
    stop=None,
    record_every=1,
    lattice_shape=None,
    h=None,
    jacobian=True,
):
    """Euler-Maruyama flow from ``start`` to ``stop`` for every lattice point."""
    level = noise.level if level is None else int(level)
    if level > noise.level:
        raise ValueError("flow level finer than the noise grid")
    N = 2**level
    dt = noise.T / N
    stop = noise.T if stop is None else stop
    s0, s1 = start / dt, stop / dt
    if abs(s0 - round(s0)) > 1e-9 or abs(s1 - round(s1)) > 1e-9 or s1 < s0:
        raise ValueError("start/stop must lie on the time grid")
    s0, s1 = int(round(s0)), int(round(s1))
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = pts.shape
    dW = noise.increments(level)
    X = pts.copy()
    J = np.broadcast_to(np.eye(d), (n, d, d)).copy() if jacobian else None
    steps, Xs, Js = [s0], [X.copy()], [None if J is None else J.copy()]
    for k in range(s0, s1):
        X, J = _advance(coeffs, X, J, k * dt, dW[k])
        if J is not None:
            _det_check(J, (k + 1) * dt, X)
        if (k + 1 - s0) % record_every == 0 or k + 1 == s1:
            steps.append(k + 1)
            Xs.append(X.copy())
            Js.append(None if J is None else J.copy())
    steps = np.asarray(steps)
    return FlowField(
        coeffs=coeffs,
        noise=noise,
        level=level,
        points=pts,
        times=steps * dt,
        steps=steps,
        X=np.stack(Xs),
        J=np.stack(Js) if jacobian else np.empty((len(steps), n, d, d)),
        start_step=s0,
        lattice_shape=None if lattice_shape is None else tuple(lattice_shape),
        h=h,
        meta={"coefficients": coeffs.identifier(), "level": level, "dt": dt},
    )


def integrate_point_ensemble(coeffs: CoefficientSet, paths, x0, level, T=1.0):
    """Flow of one starting point under each Brownian path in ``paths``.

    ``paths`` has shape ``(P, d1, 2**L + 1)`` with ``L >= level``; returns the
    terminal ``X`` (P, d) and ``J`` (P, d, d).
    """
    paths = np.asarray(paths, dtype=float)
    stride = (paths.shape[2] - 1) // 2**level
    dW = np.diff(paths[:, :, ::stride], axis=2)  # (P, d1, N)
    P = paths.shape[0]
    d = coeffs.d
    X = np.broadcast_to(np.asarray(x0, dtype=float), (P, d)).copy()
    J = np.broadcast_to(np.eye(d), (P, d, d)).copy()
    dt = T / 2**level
    for n in range(dW.shape[2]):
        X, J = _advance(coeffs, X, J, n * dt, dW[:, :, n])
    return X, J


def _initial_guess(flow: FlowField, i, target):
    if flow.d == 1 and flow.lattice_shape is not None:
        xs = flow.X[i][:, 0]
        if np.all(np.diff(xs) > 0):
            return np.interp(target[:, 0], xs, flow.points[:, 0])[:, None]
    # one fixed-point sweep from the target itself
    X, _ = flow.evaluate(target, flow.steps[i])
    return target - (X - target)


def invert_point(flow: FlowField, t, target, tol=None, max_iter=60):
    """Points ``y`` with ``|X_t(y) - target| <= tol`` by damped Newton."""
    target = np.asarray(target, dtype=float)
    single = target.ndim == 1
    tg = np.atleast_2d(target)
    i = flow.index_of(t)
    tol = 1e-10 * flow.diam if tol is None else tol
    y = _initial_guess(flow, i, tg)
    step = flow.steps[i]
    X, J = flow.evaluate(y, step)
    res = X - tg
    err = np.linalg.norm(res, axis=1)
    for _ in range(max_iter):
        if np.all(err <= tol):
            break
        delta = np.linalg.solve(J, res[..., None])[..., 0]
        lam = np.ones(len(y))
        todo = err > tol
        for _half in range(30):
            y_try = y - lam[:, None] * delta
            X_try, J_try = flow.evaluate(y_try, step)
            err_try = np.linalg.norm(X_try - tg, axis=1)
            ok = (err_try < err) | ~todo
            if ok.all():
                break
            lam = np.where(ok, lam, 0.5 * lam)
        upd = todo & (err_try < err)
        y = np.where(upd[:, None], y_try, y)
        X = np.where(upd[:, None], X_try, X)
        J = np.where(upd[:, None, None], J_try, J)
        res = X - tg
        err = np.linalg.norm(res, axis=1)
    if not np.all(err <= tol):
        raise InversionError(f"Newton did not converge: max residual {err.max():.3g} > {tol:.3g}")
    return y[0] if single else y


def inverse_path_1d(flow: FlowField, x, refine=True):
    """``s -> X_s^{-1}(x)`` at every recorded time of a 1D lattice flow.

    Monotone interpolation on the lattice gives the starting point; a few
    Newton sweeps with per-time re-integration polish it.
    """
    if flow.d != 1:
        raise ValueError("inverse_path_1d needs a one-dimensional flow")
    x = float(x)
    pts = flow.points[:, 0]
    y = np.empty(len(flow.times))
    for i in range(len(flow.times)):
        xs = flow.X[i][:, 0]
        if not (xs[0] <= x <= xs[-1]):
            raise InversionError(f"target {x} outside the flow image at t={flow.times[i]}")
        y[i] = np.interp(x, xs, pts)
    if refine:
        for _ in range(3):
            X, J = flow.evaluate(y[:, None], flow.steps)
            y = y - (X[:, 0] - x) / J[:, 0, 0]
    return y


def sqrt_psd(m):
    """Symmetric positive semidefinite square root, batched over leading axes."""
    m = 0.5 * (m + np.swapaxes(m, -1, -2))
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]) @ np.swapaxes(v, -1, -2)


@dataclass(frozen=True, eq=False)
class TransformedCoefficients:
    """Coefficients of the transformed equation at the recorded lattice states.

    ``alpha (n_t, n, d, d)``, ``beta (n_t, n, d)``, ``phi (n_t, n)``,
    ``Sigma (n_t, n, d)`` (the vector ``sigma^{ik} D_i sigma^{jk}`` at ``X``)
    and ``rho_bar (n_t, n, d, d)``.
    """

    times: np.ndarray
    points: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    phi: np.ndarray
    Sigma: np.ndarray
    rho_bar: np.ndarray


def _sigma_vector(coeffs, t, x):
    s = coeffs.eval_sigma(t, x)  # (n, i, k)
    ds = coeffs.eval_dsigma(t, x)  # (n, j, k, l) = D_l sigma^{jk}
    return np.einsum("nik,njki->nj", s, ds)


def transformed_coefficients(coeffs: CoefficientSet, flow: FlowField, rho=None, hessian=None):
    """``alpha = J^-1 abar(X) J^-T``, ``beta = -J^-1 (Sigma(X) + alpha : D^2 X)``,
    ``phi = f(t, X, 0, 0)`` and ``rho_bar = J^-1 rho(X)``.

    ``rho(t, x)`` defaults to the symmetric square root of ``abar``.
    """
    nt, n, d = flow.X.shape
    H = flow.hessian() if hessian is None else hessian
    alpha = np.empty((nt, n, d, d))
    beta = np.empty((nt, n, d))
    phi = np.zeros((nt, n))
    Sig = np.empty((nt, n, d))
    rho_bar = np.empty((nt, n, d, d))
    for i, t in enumerate(flow.times):
        X, J = flow.X[i], flow.J[i]
        if np.any(np.abs(np.linalg.det(J)) < 1e-300):
            raise FlowDegeneracyError(t, X[0])
        Jinv = np.linalg.inv(J)
        abar = coeffs.abar(t, X)
        r = sqrt_psd(abar) if rho is None else np.asarray(rho(t, X))
        if rho is not None:
            err = np.max(np.abs(r @ np.swapaxes(r, -1, -2) - abar))
            if err > 1e-10:
                raise ValueError(f"rho rho^T differs from abar by {err:.3g}")
        a = Jinv @ abar @ np.swapaxes(Jinv, -1, -2)
        alpha[i] = 0.5 * (a + np.swapaxes(a, -1, -2))
        Sig[i] = _sigma_vector(coeffs, t, X)
        second = np.einsum("nab,nmab->nm", alpha[i], H[i])
        beta[i] = -np.einsum("nij,nj->ni", Jinv, Sig[i] + second)
        rho_bar[i] = Jinv @ r
        if coeffs.f is not None:
            phi[i] = np.broadcast_to(coeffs.f(t, X, np.zeros(n), np.zeros((n, d))), (n,))
    return TransformedCoefficients(flow.times, flow.points, alpha, beta, phi, Sig, rho_bar)


def _interp_lattice(values, points, shape, x):
    """Multilinear interpolation of ``values`` (n, ...) on a lattice at ``x`` (m, d)."""
    d = points.shape[1]
    grid = points.reshape(tuple(shape) + (d,))
    axes = [grid[tuple(slice(None) if k == a else 0 for k in range(d))][..., a] for a in range(d)]
    vals = values.reshape(tuple(shape) + values.shape[1:])
    idx, wts = [], []
    for a in range(d):
        ax = axes[a]
        j = np.clip(np.searchsorted(ax, x[:, a]) - 1, 0, len(ax) - 2)
        w = (x[:, a] - ax[j]) / (ax[j + 1] - ax[j])
        idx.append(j)
        wts.append(w)
    out = 0.0
    for corner in range(2**d):
        sel, w = [], 1.0
        for a in range(d):
            bit = (corner >> a) & 1
            sel.append(idx[a] + bit)
            w = w * (wts[a] if bit else 1.0 - wts[a])
        w = w.reshape((-1,) + (1,) * (vals.ndim - d))
        out = out + w * vals[tuple(sel)]
    return out


def composition_residual(coeffs, noise, points, s, t, v, level=None, lattice_shape=None, outer="interpolate"):
    """``max |X_{t,v}(X_{s,t}(x)) - X_{s,v}(x)|`` over the lattice.

    ``outer="interpolate"`` evaluates the outer flow by multilinear
    interpolation of its lattice values; ``outer="exact"`` re-integrates it.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    kw = dict(level=level, record_every=10**9, jacobian=False)
    inner = integrate_forward(coeffs, noise, pts, start=s, stop=t, **kw)
    full = integrate_forward(coeffs, noise, pts, start=s, stop=v, **kw)
    mid = inner.X[-1]
    if outer == "exact":
        outer_flow = integrate_forward(coeffs, noise, pts, start=t, stop=t, **kw)
        composed, _ = outer_flow.evaluate(mid, int(round(v / outer_flow.dt)))
    else:
        shape = lattice_shape if lattice_shape is not None else (len(pts),)
        of = integrate_forward(coeffs, noise, pts, start=t, stop=v, **kw)
        # only inner images inside the lattice hull can be interpolated
        inside = np.all((mid >= pts.min(axis=0)) & (mid <= pts.max(axis=0)), axis=1)
        composed = _interp_lattice(of.X[-1], pts, shape, mid[inside])
        return float(np.max(np.linalg.norm(composed - full.X[-1][inside], axis=1), initial=0.0))
    return float(np.max(np.linalg.norm(composed - full.X[-1], axis=1)))


def _W(flow, i):
    return flow.noise.at_level(flow.level)[:, flow.steps[i]]


def residual_increments(flow: FlowField, pairs):
    """``D_{s,t} = sup_y |X_t(y) - X_s(y) + sigma_s(X_s(y)) (W_t - W_s)|`` per index pair."""
    out = np.empty(len(pairs))
    for j, (a, b) in enumerate(pairs):
        Xs, Xt = flow.X[a], flow.X[b]
        sig = flow.coeffs.eval_sigma(flow.times[a], Xs)
        r = Xt - Xs + np.einsum("nik,k->ni", sig, _W(flow, b) - _W(flow, a))
        out[j] = np.max(np.linalg.norm(r, axis=1))
    return out


def chaining_terms(flow: FlowField, s, r, t):
    """``(|D_st|, |D_sr|, |D_rt|, |E_{s,r,r,t}|)`` for recorded indices ``s <= r <= t``."""
    D = residual_increments(flow, [(s, t), (s, r), (r, t)])
    sig_s = flow.coeffs.eval_sigma(flow.times[s], flow.X[s])
    sig_r = flow.coeffs.eval_sigma(flow.times[r], flow.X[r])
    E = np.einsum("nik,k->ni", sig_s - sig_r, _W(flow, t) - _W(flow, r))
    return D[0], D[1], D[2], float(np.max(np.linalg.norm(E, axis=1)))


@dataclass(frozen=True)
class ResidualFit:
    exponent: float | None
    intercept: float | None
    exact_cancellation: bool
    lags: np.ndarray
    residuals: np.ndarray


def residual_increment_exponent(flow: FlowField, pairs, zero_tol=1e-13):
    """Least-squares slope of ``log D_{s,t}`` against ``log |t - s|``."""
    D = residual_increments(flow, pairs)
    lags = np.array([flow.times[b] - flow.times[a] for a, b in pairs])
    scale = max(1.0, float(np.max(np.abs(flow.X))))
    if np.all(D <= zero_tol * scale):
        return ResidualFit(None, None, True, lags, D)
    ok = D > zero_tol * scale
    slope, icpt = np.polyfit(np.log(lags[ok]), np.log(D[ok]), 1)
    return ResidualFit(float(slope), float(icpt), False, lags, D)


def write_flow_csv(flow: FlowField, dest):
    d = flow.d
    names = ["x0", "y0"][:d]
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["t"] + names + ["X", "Y"][:d] + [f"J{i}{j}" for i in range(d) for j in range(d)]
        )
        for i, t in enumerate(flow.times):
            for p in range(len(flow.points)):
                w.writerow(
                    [repr(float(t))]
                    + [repr(float(q)) for q in flow.points[p]]
                    + [repr(float(q)) for q in flow.X[i, p]]
                    + [repr(float(q)) for q in flow.J[i, p].ravel()]
                )

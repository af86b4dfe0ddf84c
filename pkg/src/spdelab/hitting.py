"""Hitting probabilities for a diffusion in a parabolic cylinder.

``Q_r^p = [0, 2^-p] x B(0, 2^{-p/2} r)``; the target set ``A`` contains the
slab ``<y, n> >= c 2^{-p/2}`` inside ``Q_r^p``.  The module evaluates the
barrier ``f(y) = phi(|y~|) (y_1 + psi(|y~|))`` with its bound ``m`` and drift
cap ``C_0``, and estimates by Monte Carlo the probability that the process
stops on ``dQ_r^p`` away from ``A``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded

from .noise import keyed_normals, keyed_uniforms

__all__ = [
    "HittingExperiment",
    "HittingResult",
    "smoothstep5",
    "barrier_value",
    "barrier_numerator",
    "barrier_max",
    "drift_cap",
    "run_hitting_mc",
    "exit_split_oracle",
]

CHUNK = 4096


def smoothstep5(u):
    """Quintic smoothstep ``6u^5 - 15u^4 + 10u^3`` clamped to [0, 1] (C^2 at the ends)."""
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 + u * (-15.0 + 6.0 * u))


def _check_geometry(r, c):
    if c < 1 or r < 7 * c:
        raise ValueError(f"need c >= 1 and r >= 7c, got c={c}, r={r}")


def _phi_psi(a, r, c):
    a = np.abs(np.asarray(a, dtype=float))
    s = smoothstep5((a - 5 * r / 7) / (r / 7))
    inner = 1.0 / (c + np.sqrt(np.maximum(r * r - np.minimum(a, r) ** 2, 0.0)))
    return (1 - s) * inner + s, c + s


def barrier_value(y, r, c):
    """``f(y)`` for ``y`` of shape ``(..., d)``; ``y~`` is ``y[..., 1:]``."""
    _check_geometry(r, c)
    y = np.asarray(y, dtype=float)
    rho = np.linalg.norm(y[..., 1:], axis=-1) if y.shape[-1] > 1 else np.zeros(y.shape[:-1])
    phi, psi = _phi_psi(rho, r, c)
    return phi * (y[..., 0] + psi)


def barrier_numerator(y1, r, c):
    """Numerator of ``g'(y_1)`` for ``g(y_1) = (y_1 + c) / (c + sqrt(r^2/2 + y_1^2))``."""
    q = np.sqrt(r * r / 2 + np.asarray(y1, dtype=float) ** 2)
    return c * q - c * y1 + r * r / 2


def barrier_max(r, c, n_check=100_001):
    """``m = max f`` over the half ball ``|y| <= r / sqrt 2``, attained at ``y_1 = r / sqrt 2``.

    Raises ``ArithmeticError`` if ``g'`` is not positive on a dense grid of
    ``[-r/sqrt 2, r/sqrt 2]`` or at the critical candidate of the numerator.
    """
    _check_geometry(r, c)
    R = r / np.sqrt(2)
    grid = np.linspace(-R, R, n_check)
    cand = (r * r / 4 - c * c / 2) / c
    if np.min(barrier_numerator(grid, r, c)) <= 0 or barrier_numerator(cand, r, c) <= 0:
        raise ArithmeticError("g' is not positive on the half ball")
    return float((R + c) / (c + r))


def _radial_derivatives(y1, rho, r, c, eps):
    f = lambda a, b: _phi_psi(b, r, c)[0] * (a + _phi_psi(b, r, c)[1])
    f1 = (f(y1 + eps, rho) - f(y1 - eps, rho)) / (2 * eps)
    fr = (f(y1, rho + eps) - f(y1, rho - eps)) / (2 * eps)
    frr = (f(y1, rho + eps) - 2 * f(y1, rho) + f(y1, rho - eps)) / eps**2
    f1r = (
        f(y1 + eps, rho + eps) - f(y1 + eps, rho - eps) - f(y1 - eps, rho + eps) + f(y1 - eps, rho - eps)
    ) / (4 * eps**2)
    return f1, fr, frr, f1r


def drift_cap(r, c, d, Delta, n_grid=801, eps=1e-4, return_chat=False):
    """``C_0 = (1 - m) / (2 C^)`` with ``C^`` a grid sup over ``B_r`` of
    ``|grad f| + Delta/2 max(sum lambda_+, sum |lambda_-|)`` (``lambda``: Hessian eigenvalues).

    ``f`` depends on ``(y_1, |y~|)`` only, so the sup runs over a 2D grid in
    those coordinates; the Hessian has the in-plane block plus the eigenvalue
    ``f_rho / rho`` of multiplicity ``d - 2``.  A slack equal to the largest
    neighbour difference of the integrand covers the gaps between nodes.
    """
    _check_geometry(r, c)
    m = barrier_max(r, c)
    y1 = np.linspace(-r, r, n_grid)
    if d == 1:
        rho = np.zeros(1)
    else:
        hr = r / (n_grid - 1)
        rho = np.arange(0.5, n_grid) * hr
    Y, R = np.meshgrid(y1, rho, indexing="ij")
    inside = Y**2 + R**2 <= r * r
    f1, fr, frr, f1r = _radial_derivatives(Y, R, r, c, eps)
    if d == 1:
        grad = np.abs(f1)
        lam = np.zeros(Y.shape + (1,))
    else:
        grad = np.sqrt(f1**2 + fr**2)
        # 2x2 block [[0, f1r], [f1r, frr]]
        tr, det = frr, -(f1r**2)
        disc = np.sqrt(np.maximum(tr**2 / 4 - det, 0.0))
        eig = [tr / 2 + disc, tr / 2 - disc]
        if d > 2:
            eig += [fr / R] * (d - 2)
        lam = np.stack(eig, axis=-1)
    pos = np.sum(np.maximum(lam, 0.0), axis=-1)
    neg = np.sum(np.maximum(-lam, 0.0), axis=-1)
    integrand = grad + 0.5 * Delta * np.maximum(pos, neg)
    integrand = np.where(inside, integrand, 0.0)
    slack = 0.0
    for ax in range(integrand.ndim):
        if integrand.shape[ax] > 1:
            slack = max(slack, float(np.max(np.abs(np.diff(integrand, axis=ax)))))
    chat = float(np.max(integrand)) + slack
    c0 = (1 - m) / (2 * chat)
    return (c0, chat) if return_chat else c0


@dataclass(frozen=True)
class HittingExperiment:
    """Geometry, coefficients and Monte Carlo settings.

    ``drift(s, y) -> (m, d)`` and ``diffusion(s, y) -> (m, d, d)`` are
    callbacks in absolute coordinates (``s`` absolute time, ``y = x + xi``);
    ``None`` means ``b = 0`` and ``a = I``.  ``target(s, y) -> bool (m,)``
    replaces the default target (the slab) when given; it must contain the
    slab.  ``bounds`` records ``(C, delta, Delta)``.
    """

    p: int
    r: float
    c: float
    n: tuple
    start: tuple  # (t, x)
    n_paths: int
    dt: float
    drift: Callable | None = None
    diffusion: Callable | None = None
    target: Callable | None = None
    bounds: tuple = (0.0, 1.0, 1.0)
    seed: int = 0
    stream: int = 0
    workers: int = 1
    bridge: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_geometry(self.r, self.c)
        n = np.asarray(self.n, dtype=float)
        if abs(np.linalg.norm(n) - 1) > 1e-12:
            raise ValueError("n must be a unit vector")
        if self.n_paths <= 0:
            raise ValueError("n_paths must be positive")
        t, x = self.start
        x = np.asarray(x, dtype=float)
        if x.shape != n.shape:
            raise ValueError("start point and n have different dimensions")
        q = 2.0 ** -(self.p + 1)
        if not (0 <= t <= q and np.linalg.norm(x) <= np.sqrt(q) * self.r + 1e-12):
            raise ValueError("start must lie in Q_r^{p+1}")

    @property
    def d(self):
        return len(self.n)

    @property
    def horizon(self):
        return 2.0**-self.p

    @property
    def radius(self):
        return 2.0 ** (-self.p / 2) * self.r

    @property
    def level(self):
        return self.c * 2.0 ** (-self.p / 2)

    def in_target(self, s, y):
        slab = y @ np.asarray(self.n, dtype=float) >= self.level
        if self.target is None:
            return slab
        return slab | self.target(s, y)


@dataclass(frozen=True)
class HittingResult:
    p_not_through_A: float
    standard_error: float
    n_paths: int
    outcome: np.ndarray  # 1 if the stop point is not in A
    tau: np.ndarray


def _simulate(exp: HittingExperiment, replicas):
    m, d = len(replicas), exp.d
    r0 = int(replicas[0])
    n = np.asarray(exp.n, dtype=float)
    t0, x0 = exp.start
    x0 = np.asarray(x0, dtype=float)
    dt = exp.dt
    remaining = exp.horizon - t0
    n_steps = int(np.ceil(remaining / dt - 1e-9))
    Y = np.broadcast_to(x0, (m, d)).copy()
    alive = ~exp.in_target(t0, Y)
    outcome = np.zeros(m)
    tau = np.zeros(m)
    R, lev = exp.radius, exp.level
    for j in range(n_steps):
        if not alive.any():
            break
        h = min(dt, remaining - j * dt)
        s = t0 + j * dt
        idx = np.flatnonzero(alive)
        Ya = Y[idx]
        z = np.stack([keyed_normals(exp.seed, exp.stream, j, k, r0, m)[idx] for k in range(d)], axis=1)
        if exp.diffusion is None:
            sig = np.broadcast_to(np.eye(d), (len(idx), d, d))
        else:
            sig = exp.diffusion(s, Ya)
        step = np.einsum("nij,nj->ni", sig, z) * np.sqrt(h)
        if exp.drift is not None:
            step += exp.drift(s, Ya) * h
        Yn = Ya + step
        # signed distances (positive inside) to the slab and to the sphere
        da_A, db_A = lev - Ya @ n, lev - Yn @ n
        da_B, db_B = R - np.linalg.norm(Ya, axis=1), R - np.linalg.norm(Yn, axis=1)
        hit_A = db_A <= 0
        hit_B = db_B <= 0
        if exp.target is not None:
            hit_A |= exp.target(s + h, Yn)
        if exp.bridge:
            cov = np.einsum("nij,nkj->nik", sig, sig)
            vA = np.einsum("i,nij,j->n", n, cov, n)
            u = Ya / np.maximum(np.linalg.norm(Ya, axis=1), 1e-300)[:, None]
            vB = np.einsum("ni,nij,nj->n", u, cov, u)
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                pA = np.where(hit_A, 0.0, np.exp(-2 * da_A * db_A / (vA * h)))
                pB = np.where(hit_B, 0.0, np.exp(-2 * da_B * db_B / (vB * h)))
            uA = keyed_uniforms(exp.seed, exp.stream, j, d, r0, m)[idx]
            uB = keyed_uniforms(exp.seed, exp.stream, j, d + 1, r0, m)[idx]
            hit_A |= uA < pA
            hit_B |= uB < pB
        # first crossing along the straight step decides the stop point
        fA = np.where(hit_A, da_A / np.where(da_A - db_A > 0, da_A - db_A, 1.0), np.inf)
        fB = np.where(hit_B, da_B / np.where(da_B - db_B > 0, da_B - db_B, 1.0), np.inf)
        fA = np.where(hit_A & ~np.isfinite(fA), 0.5, np.clip(fA, 0, 1))
        fB = np.where(hit_B & ~np.isfinite(fB), 0.5, np.clip(fB, 0, 1))
        fA = np.where(hit_A, fA, np.inf)
        fB = np.where(hit_B, fB, np.inf)
        stop = hit_A | hit_B
        not_A = hit_B & (fB < fA)
        Y[idx] = Yn
        k = idx[stop]
        alive[k] = False
        tau[k] = j * dt + np.minimum(fA, fB)[stop] * h
        outcome[idx[not_A]] = 1.0
    # survivors reach the top face of the cylinder outside A
    left = np.flatnonzero(alive)
    outcome[left] = 1.0
    tau[left] = remaining
    return outcome, tau


def run_hitting_mc(exp: HittingExperiment) -> HittingResult:
    """Fraction of paths whose stop point on ``A u dQ_r^p`` is not in ``A``."""
    chunks = [np.arange(a, min(a + CHUNK, exp.n_paths)) for a in range(0, exp.n_paths, CHUNK)]
    if exp.workers > 1:
        with ThreadPoolExecutor(exp.workers) as ex:
            parts = list(ex.map(lambda r: _simulate(exp, r), chunks))
    else:
        parts = [_simulate(exp, r) for r in chunks]
    outcome = np.concatenate([p[0] for p in parts])
    tau = np.concatenate([p[1] for p in parts])
    p = float(np.mean(outcome))
    se = float(np.sqrt(p * (1 - p) / len(outcome)))
    return HittingResult(p, se, len(outcome), outcome, tau)


def exit_split_oracle(c, r, x=0.0, t=0.0, a=1.0, nx=4001, nt=4000):
    """1D oracle: ``P`` that ``x + a B`` started at time ``t`` leaves ``(-c, r)`` through ``r``
    or survives to time 1.

    Crank-Nicolson for ``u_s + a^2/2 u_yy = 0`` with ``u(1, .) = 1``,
    ``u(., -c) = 0``, ``u(., r) = 1`` (four implicit Euler start-up steps damp
    the corner discontinuity), then linear interpolation at ``x``.
    """
    y = np.linspace(-c, r, nx)
    h = y[1] - y[0]
    u = np.ones(nx)
    u[0] = 0.0
    T = 1.0 - t
    k = T / nt
    lam = 0.5 * a * a * k / h**2
    ni = nx - 2

    def solve(theta, dt_frac, u):
        lm = lam * dt_frac
        ab = np.zeros((3, ni))
        ab[0, 1:] = -theta * lm
        ab[1] = 1 + 2 * theta * lm
        ab[2, :-1] = -theta * lm
        ex = (1 - theta) * lm
        rhs = u[1:-1] + ex * (u[:-2] - 2 * u[1:-1] + u[2:])
        rhs[-1] += theta * lm * u[-1]
        rhs[0] += theta * lm * u[0]
        out = u.copy()
        out[1:-1] = solve_banded((1, 1), ab, rhs)
        return out

    for _ in range(4):
        u = solve(1.0, 0.25, u)
    for _ in range(nt - 1):
        u = solve(0.5, 1.0, u)
    return float(np.interp(x, y, u))

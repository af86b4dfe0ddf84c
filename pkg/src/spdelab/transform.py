"""Solve the transformed equation in one dimension and map it back.

For ``u`` solving the SPDE on ``(lo, hi)``, ``v_t(y) = u_t(X_t(y))`` solves
``v_t = alpha v_yy + beta v_y + phi`` on the moving interval
``(X_t^{-1}(lo), X_t^{-1}(hi))``.  The coefficients come from
``transformed_coefficients`` on the flow lattice and are interpolated
linearly in space; the interval ends come from ``inverse_path_1d``.
"""
from __future__ import annotations

import numpy as np

from .flows import FlowField, TransformedCoefficients, integrate_forward, inverse_path_1d, invert_point
from .flows import transformed_coefficients
from .geometry import Domain
from .moving import MovingLattice, sample_on_interval, solve_moving_interval
from .noise import WienerPath
from .spde import CoefficientSet, GridSpec, SpdeProblem, solve

__all__ = ["solve_transformed_1d", "transformation_gap"]


def solve_transformed_1d(domain: Domain, psi, flow: FlowField, tc: TransformedCoefficients, h, probes):
    """``v_T(X_T^{-1}(x))`` at each probe ``x`` from a backward-Euler moving solve.

    ``flow`` must record every step on its grid.
    """
    if flow.d != 1 or domain.kind != "interval":
        raise ValueError("transformed solve is one-dimensional")
    if len(flow.times) != 2**flow.level + 1 - flow.start_step:
        raise ValueError("flow must record every time step")
    xs = flow.points[:, 0]
    dt = flow.dt
    left = inverse_path_1d(flow, domain.lo)
    right = inverse_path_1d(flow, domain.hi)
    lo = np.floor((left.min() - 2 * h) / h) * h
    M = int(np.ceil((right.max() - lo) / h)) + 4
    lat = MovingLattice(np.array([lo]), h, M)

    def coef(arr):
        return lambda t, y: np.interp(y, xs, arr[int(round(t / dt))])

    inside = (lat.y > left[0]) & (lat.y < right[0])
    v0 = np.where(inside, psi(np.clip(lat.y, domain.lo, domain.hi)[..., None]), 0.0)
    phi = None
    if np.any(tc.phi != 0):
        phi_t = coef(tc.phi)
        phi = lambda t, y, v, vy: phi_t(t, y)
    _, frames = solve_moving_interval(
        lat, left[:, None], right[:, None], v0, dt,
        coef(tc.alpha[..., 0, 0]), beta=coef(tc.beta[..., 0]), phi=phi,
    )
    probes = np.asarray(probes, dtype=float)
    y = invert_point(flow, flow.times[-1], probes[:, None])[:, 0]
    return sample_on_interval(lat, frames[-1], [left[-1]], [right[-1]], y[None])[0]


def transformation_gap(coeffs: CoefficientSet, domain: Domain, noise: WienerPath, T, level, h, probes, pad=None):
    """Grid solution ``u_T`` and transformed solution at the probes, for one path.

    Returns ``(u, v)``; the flow lattice covers ``domain`` padded by ``pad``
    with spacing ``h``, and the moving solve uses spacing ``h / 2``.  The
    default pad exceeds the largest displacement ``sup|sigma| sup|W|``.
    """
    if pad is None:
        xs = np.linspace(domain.lo - 3.0, domain.hi + 3.0, 601)[:, None]
        smax = float(np.max(np.abs(coeffs.eval_sigma(0.0, xs)), initial=0.0))
        pad = 0.5 + 1.5 * smax * float(np.max(np.abs(noise.values)))
    grid = GridSpec(h, level, record_every=2**level)
    sol = solve(SpdeProblem(domain, coeffs, T), grid, noise)
    pts = np.arange(domain.lo - pad, domain.hi + pad + h / 2, h)[:, None]
    flow = integrate_forward(coeffs, noise, pts, level, lattice_shape=(len(pts),), h=h)
    tc = transformed_coefficients(coeffs, flow)
    v = solve_transformed_1d(domain, coeffs.psi, flow, tc, h / 2, probes)
    u = np.interp(probes, sol.nodes[:, 0], sol.values[-1])
    return u, v

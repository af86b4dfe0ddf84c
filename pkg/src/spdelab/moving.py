"""Implicit solver for 1D parabolic equations on randomly moving intervals.

Solves ``v_t = alpha v_yy + beta v_y + phi`` on ``(left(t), right(t))`` with
``v = 0`` at both moving ends.  Each path has its own fixed lattice
``y0[p] + j h``; nodes outside the current interval are held at 0 and the
ends are treated with Shortley-Weller cut cells.  All paths are stacked into
a single banded system per step.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

__all__ = ["MovingLattice", "solve_moving_interval", "sample_on_interval"]


class MovingLattice:
    def __init__(self, y0, h, n_nodes):
        self.y0 = np.asarray(y0, dtype=float)
        self.h = float(h)
        self.n_nodes = int(n_nodes)
        self.y = self.y0[:, None] + self.h * np.arange(self.n_nodes)[None, :]

    def arms(self, left, right):
        """Active mask and left/right arm lengths for boundaries ``left, right`` (P,)."""
        y, h = self.y, self.h
        tol = 1e-9 * h
        active = (y - left[:, None] > tol) & (right[:, None] - y > tol)
        hm = np.minimum(y - left[:, None], h)
        hp = np.minimum(right[:, None] - y, h)
        # a neighbour is a lattice node only if it is active as well
        prev_active = np.zeros_like(active)
        prev_active[:, 1:] = active[:, :-1]
        next_active = np.zeros_like(active)
        next_active[:, :-1] = active[:, 1:]
        hm = np.where(prev_active, h, hm)
        hp = np.where(next_active, h, hp)
        return active, hm, hp, prev_active, next_active


def _stencils(hm, hp):
    # inactive rows can carry non-positive arms; they are masked by the caller
    hm = np.maximum(hm, 1e-300)
    hp = np.maximum(hp, 1e-300)
    cm2 = 2.0 / (hm * (hm + hp))
    cp2 = 2.0 / (hp * (hm + hp))
    cm1 = -hp / (hm * (hm + hp))
    cp1 = hm / (hp * (hm + hp))
    c01 = (hp - hm) / (hm * hp)
    return cm2, cp2, cm1, cp1, c01


def gradient(v, arms):
    active, hm, hp, pa, na = arms
    _, _, cm1, cp1, c01 = _stencils(hm, hp)
    vm = np.zeros_like(v)
    vm[:, 1:] = v[:, :-1]
    vp = np.zeros_like(v)
    vp[:, :-1] = v[:, 1:]
    vm = np.where(pa, vm, 0.0)
    vp = np.where(na, vp, 0.0)
    return np.where(active, cm1 * vm + c01 * v + cp1 * vp, 0.0)


def solve_moving_interval(
    lat: MovingLattice,
    left,
    right,
    v0,
    dt,
    alpha,
    beta=None,
    phi=None,
    record_every=None,
    observer=None,
):
    """Backward-Euler integration over ``len(left) - 1`` steps.

    ``left, right``: boundary positions, shape ``(n_steps + 1, P)``.
    ``alpha(t, y) / beta(t, y)`` return arrays of shape ``(P, n_nodes)``;
    ``phi(t, y, v, v_y)`` likewise and is explicit.  Returns recorded
    ``(times, frames)`` with frames of shape ``(P, n_nodes)``; the final state
    is always recorded.
    """
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    n_steps = left.shape[0] - 1
    P, M = lat.y.shape
    h = lat.h
    # only a window of nodes covering the current interval enters each solve
    Mw = min(M, int(np.ceil(np.max(right - left) / h)) + 3)
    rows = np.arange(P)[:, None]
    cols = np.arange(Mw)[None, :]
    arms0 = lat.arms(left[0], right[0])
    v = np.where(arms0[0], np.asarray(v0, dtype=float), 0.0)
    times, frames = [0.0], [v.copy()]
    ab = np.zeros((3, P * Mw))

    def window(n):
        j0 = np.floor((left[n] - lat.y0) / h).astype(int) - 1
        j0 = np.clip(j0, 0, M - Mw)
        idx = j0[:, None] + cols
        sub = MovingLattice(lat.y0 + j0 * h, h, Mw)
        return idx, sub

    for n in range(n_steps):
        t = n * dt
        t1 = t + dt
        idx, sub = window(n + 1)
        vw = v[rows, idx]
        arms = sub.arms(left[n + 1], right[n + 1])
        active, hm, hp, pa, na = arms
        rhs = np.where(active, vw, 0.0)
        if phi is not None:
            prev = sub.arms(left[n], right[n])
            vy = gradient(vw, prev)
            rhs = rhs + dt * np.where(active, phi(t, sub.y, vw, vy), 0.0)
        cm2, cp2, cm1, cp1, c01 = _stencils(hm, hp)
        a = alpha(t1, sub.y)
        lo = a * cm2
        up = a * cp2
        di = -a * (cm2 + cp2)
        if beta is not None:
            b = beta(t1, sub.y)
            lo = lo + b * cm1
            up = up + b * cp1
            di = di + b * c01
        diag = np.where(active, 1.0 - dt * di, 1.0)
        lower = np.where(active & pa, -dt * lo, 0.0)  # coefficient of v[j-1] in row j
        upper = np.where(active & na, -dt * up, 0.0)  # coefficient of v[j+1] in row j
        ab[1] = diag.ravel()
        ab[0, 1:] = upper.ravel()[:-1]
        ab[0, 0] = 0.0
        ab[2, :-1] = lower.ravel()[1:]
        ab[2, -1] = 0.0
        vw = solve_banded((1, 1), ab, rhs.ravel(), check_finite=False).reshape(P, Mw)
        v = np.zeros_like(v)
        v[rows, idx] = np.where(active, vw, 0.0)
        if observer is not None:
            observer(t1, v)
        if (record_every and (n + 1) % record_every == 0) or n + 1 == n_steps:
            times.append(t1)
            frames.append(v.copy())
    return np.asarray(times), frames


def sample_on_interval(lat: MovingLattice, v, left, right, y):
    """Piecewise-linear interpolant of ``v`` (zero at the moving ends) at ``y`` (P, m)."""
    P = v.shape[0]
    out = np.zeros(y.shape)
    for p in range(P):
        yy = lat.y[p]
        inside = (yy > left[p]) & (yy < right[p])
        xp = np.concatenate([[left[p]], yy[inside], [right[p]]])
        fp = np.concatenate([[0.0], v[p, inside], [0.0]])
        q = y[p]
        ok = (q > left[p]) & (q < right[p])
        out[p] = np.where(ok, np.interp(q, xp, fp), 0.0)
    return out

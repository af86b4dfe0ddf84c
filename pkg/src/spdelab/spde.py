"""Drift-implicit Euler-Maruyama solver for semilinear SPDEs with Dirichlet data.

The equation is

    du = (a^{ij} D_i D_j u + f(t, x, u, Du)) dt + (sigma^{ik} D_i u + g^k(t, x, u)) dW^k

on an interval or a disk.  The second-order part is solved implicitly with a
sparse LU factorisation; f, g and the gradient noise are explicit at the
previous state.  Coefficient callables broadcast over leading axes: ``x`` has
shape ``(..., d)``, ``y`` shape ``(...)`` and ``z`` shape ``(..., d)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Domain, Lattice, lattice
from .noise import WienerPath

__all__ = [
    "CoefficientSet",
    "CoefficientValidationError",
    "NumericalError",
    "SpdeProblem",
    "GridSpec",
    "GridSolution",
    "constant_coefficients",
    "krylov_coefficients",
    "bump",
    "coercivity_gap",
    "step",
    "solve",
    "solve_ensemble",
    "truncate_nonlinearity",
    "energy_norms",
    "write_solution_csv",
    "solution_manifest",
]


class CoefficientValidationError(ValueError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, message, t):
        super().__init__(f"{message} (t={t:.6g})")
        self.t = t


def bump(x, lo=0.2, hi=0.8):
    """Standard C-infinity bump supported on ``[lo, hi]``, equal to e^-1 at the centre."""
    x = np.asarray(x, dtype=float)
    c, w = 0.5 * (lo + hi), 0.5 * (hi - lo)
    s = ((x - c) / w) ** 2
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)


@dataclass(frozen=True)
class CoefficientSet:
    """Coefficients ``a, sigma, f, g, psi`` of the equation.

    ``a(t, x) -> (..., d, d)``, ``sigma(t, x) -> (..., d, d1)``,
    ``f(t, x, y, z) -> (...)``, ``g(t, x, y) -> (..., d1)``, ``psi(x) -> (...)``.
    With ``support`` set, ``a`` and ``sigma`` are multiplied by the smooth
    cutoff of ``support`` so they vanish outside ``G + B_ext``.
    """

    d: int
    d1: int
    a: Callable
    sigma: Callable
    psi: Callable
    f: Callable | None = None
    g: Callable | None = None
    dsigma: Callable | None = None
    support: Domain | None = None
    time_independent: bool = True
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def _cut(self, x):
        if self.support is None:
            return 1.0
        return self.support.support_cutoff(x)[..., None, None]

    def eval_a(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.a(t, x), x.shape[:-1] + (self.d, self.d)) * self._cut(x)

    def eval_sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.sigma(t, x), x.shape[:-1] + (self.d, self.d1)) * self._cut(x)

    def eval_dsigma(self, t, x, eps=1e-6):
        """``D_l sigma^{ik}`` with shape ``(..., d, d1, d)`` (last axis is l)."""
        x = np.asarray(x, dtype=float)
        if self.dsigma is not None and self.support is None:
            return np.broadcast_to(self.dsigma(t, x), x.shape[:-1] + (self.d, self.d1, self.d))
        out = np.empty(x.shape[:-1] + (self.d, self.d1, self.d))
        for l in range(self.d):
            e = np.zeros(self.d)
            e[l] = eps
            out[..., l] = (self.eval_sigma(t, x + e) - self.eval_sigma(t, x - e)) / (2 * eps)
        return out

    def abar(self, t, x):
        s = self.eval_sigma(t, x)
        return self.eval_a(t, x) - 0.5 * s @ np.swapaxes(s, -1, -2)

    def identifier(self) -> str:
        if not self.params:
            return self.name
        inner = ",".join(f"{k}={self.params[k]!r}" for k in sorted(self.params))
        return f"{self.name}({inner})"


def constant_coefficients(a, sigma, psi, f=None, g=None, support=None, name="constant", **params):
    """Coefficient set with constant matrices ``a`` (d x d) and ``sigma`` (d x d1)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim < 2:
        sigma = sigma.reshape(a.shape[0], -1)
    d, d1 = sigma.shape
    zero_ds = np.zeros((d, d1, d))
    return CoefficientSet(
        d=d,
        d1=d1,
        a=lambda t, x: a,
        sigma=lambda t, x: sigma,
        dsigma=lambda t, x: zero_ds,
        psi=psi,
        f=f,
        g=g,
        support=support,
        name=name,
        params=params,
    )


def krylov_coefficients(lam, psi=None):
    """``du = u_xx dt + sqrt(2 - lam) u_x dW`` with a bump initial condition."""
    if psi is None:
        psi = lambda x: bump(x[..., 0])
    return constant_coefficients(
        [[1.0]], [[np.sqrt(2.0 - lam)]], psi, name="krylov", lam=float(lam)
    )


@dataclass(frozen=True)
class SpdeProblem:
    domain: Domain
    coeffs: CoefficientSet
    T: float

    def __post_init__(self):
        if self.coeffs.d != self.domain.dim:
            raise CoefficientValidationError(
                f"coefficient dimension {self.coeffs.d} != domain dimension {self.domain.dim}"
            )
        if self.T < 0:
            raise ValueError("horizon must be >= 0")


@dataclass(frozen=True)
class GridSpec:
    """Space step ``h``, time level (``dt = T * 2**-level``) and recording stride."""

    h: float
    level: int
    record_every: int = 1


@dataclass(frozen=True, eq=False)
class GridSolution:
    """Solution values on the full lattice (zeros on and outside the boundary)."""

    domain: Domain
    h: float
    dt: float
    times: np.ndarray
    values: np.ndarray
    seed: int | None = None
    stream: int | None = None
    replica: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def lattice(self) -> Lattice:
        return lattice(self.domain, self.h)

    @property
    def nodes(self):
        return self.lattice.nodes

    @property
    def distance(self):
        return self.lattice.distance

    def slice_at(self, t):
        """Recorded slice nearest to time ``t``."""
        i = int(np.argmin(np.abs(self.times - t)))
        return self.values[i]


def _check_symmetric(a, where):
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0)
    scale = max(1.0, float(np.max(np.abs(a), initial=0.0)))
    if asym > 1e-12 * scale:
        raise CoefficientValidationError(f"a is not symmetric at {where} (asymmetry {asym:.3g})")


def coercivity_gap(coeffs: CoefficientSet, samples) -> float:
    """Smallest eigenvalue of ``a - sigma sigma^T / 2`` over ``(t, x)`` samples.

    ``samples`` is an iterable of ``(t, x)`` pairs with ``x`` of shape
    ``(d,)`` or ``(n, d)``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty sample set")
    gap = np.inf
    for t, x in samples:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = coeffs.eval_a(t, x)
        _check_symmetric(a, f"t={t}")
        s = coeffs.eval_sigma(t, x)
        abar = a - 0.5 * s @ np.swapaxes(s, -1, -2)
        abar = 0.5 * (abar + np.swapaxes(abar, -1, -2))
        gap = min(gap, float(np.linalg.eigvalsh(abar).min()))
    return gap


def truncate_nonlinearity(f, n, m):
    """``f(t, x, clip(y, -n, m), z)``."""
    if n < 0 or m < 0:
        raise ValueError("truncation levels must be >= 0")

    def f_nm(t, x, y, z):
        return f(t, x, np.clip(y, -n, m), z)

    return f_nm


class _Stepper:
    """Holds the lattice operators and a cached factorisation."""

    def __init__(self, coeffs: CoefficientSet, domain: Domain, h: float):
        self.coeffs = coeffs
        self.lat = lattice(domain, h)
        self.x = self.lat.interior_nodes
        self.ops = self.lat.operators
        self._cache = None

    def _generator(self, t):
        c = self.coeffs
        a = c.eval_a(t, self.x)
        _check_symmetric(a, f"t={t}")
        d = c.d
        n = self.lat.n_interior
        A = sp.csr_matrix((n, n))
        for i in range(d):
            for j in range(i, d):
                w = a[:, i, j] if i == j else 2.0 * a[:, i, j]
                if np.any(w != 0):
                    A = A + sp.diags(w) @ self.ops["DD"][i][j]
        return A

    def factor(self, t, dt):
        key = (None if self.coeffs.time_independent else t, dt)
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        n = self.lat.n_interior
        M = (sp.identity(n, format="csc") - dt * self._generator(t)).tocsc()
        try:
            lu = spla.splu(M)
        except RuntimeError as exc:
            raise NumericalError(f"implicit system is singular: {exc}", t) from exc
        self._cache = (key, lu)
        return lu

    def _sigma(self, t):
        if self.coeffs.time_independent:
            if not hasattr(self, "_sig"):
                self._sig = self.coeffs.eval_sigma(t, self.x)
            return self._sig
        return self.coeffs.eval_sigma(t, self.x)

    def __call__(self, u, t, dt, dW):
        """One step for ``u`` of shape ``(n_int, P)`` and ``dW`` of shape ``(d1, P)``."""
        c = self.coeffs
        sig = self._sigma(t)
        need_grad = c.f is not None or np.any(sig != 0)
        grad = [D @ u for D in self.ops["D"]] if need_grad else None
        rhs = u.copy()
        xb = self.x[:, None, :]
        if c.f is not None:
            z = np.stack(grad, axis=-1)
            rhs += dt * np.broadcast_to(c.f(t, xb, u, z), u.shape)
        g = c.g(t, xb, u) if c.g is not None else None
        for k in range(c.d1):
            term = None
            for i in range(c.d):
                s = sig[:, i, k]
                if np.any(s != 0):
                    contrib = s[:, None] * grad[i]
                    term = contrib if term is None else term + contrib
            if g is not None:
                gk = np.broadcast_to(g[..., k], u.shape)
                term = gk if term is None else term + gk
            if term is not None:
                rhs += term * dW[k]
        out = self.factor(t, dt).solve(rhs)
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite state after implicit solve", t + dt)
        return out


def step(state, t, dt, dW, coeffs: CoefficientSet, domain: Domain, h: float):
    """Advance interior values by one drift-implicit Euler-Maruyama step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    dW = np.asarray(dW, dtype=float)
    if dW.shape[0] != coeffs.d1:
        raise ValueError(f"dW has {dW.shape[0]} components, expected {coeffs.d1}")
    state = np.asarray(state, dtype=float)
    single = state.ndim == 1
    u = state[:, None] if single else state
    dW = dW.reshape(coeffs.d1, -1)
    out = _Stepper(coeffs, domain, h)(u, t, dt, dW)
    return out[:, 0] if single else out


def _grid_gap(coeffs, lat):
    x = lat.interior_nodes
    ts = [0.0] if coeffs.time_independent else [0.0, 0.5, 1.0]
    return coercivity_gap(coeffs, [(t, x) for t in ts])


def solve_ensemble(problem: SpdeProblem, grid: GridSpec, noises, check_gap=True, observer=None):
    """Solve on each path in ``noises`` (all at the same level), batched.

    ``observer(t, u)`` is called after every step with the interior values
    of shape ``(n_interior, n_paths)``.
    """
    noises = list(noises)
    dom, c, T = problem.domain, problem.coeffs, problem.T
    lat = lattice(dom, grid.h)
    x = lat.interior_nodes
    u0 = np.asarray(c.psi(x), dtype=float)
    P = max(len(noises), 1)

    def pack(times, frames, dt):
        vals = lat.full(np.stack(frames, axis=0).transpose(2, 0, 1))  # (P, n_t, n_nodes)
        out = []
        for p in range(P):
            nz = noises[p] if noises else None
            out.append(
                GridSolution(
                    domain=dom,
                    h=grid.h,
                    dt=dt,
                    times=np.asarray(times),
                    values=np.ascontiguousarray(vals[p]),
                    seed=None if nz is None else nz.seed,
                    stream=None if nz is None else nz.stream,
                    replica=None if nz is None else nz.replica,
                    meta={
                        "scheme": "drift-implicit Euler-Maruyama",
                        "coefficients": c.identifier(),
                        "h": grid.h,
                        "dt": dt,
                        "level": grid.level,
                        "T": T,
                    },
                )
            )
        return out

    if T == 0:
        return pack([0.0], [np.repeat(u0[:, None], P, axis=1)], 0.0)
    if not noises:
        raise ValueError("at least one noise path is required for T > 0")
    if check_gap:
        gap = _grid_gap(c, lat)
        if not gap > 0:
            raise CoefficientValidationError(f"coercivity gap {gap:.3g} <= 0 on the grid")
    level = grid.level
    for nz in noises:
        if nz.level < level or abs(nz.T - T) > 1e-12 * T or nz.d1 != c.d1:
            raise ValueError("noise path does not resolve the time grid")
    n_steps = 2**level
    dt = T / n_steps
    dW = np.stack([nz.increments(level) for nz in noises], axis=2)  # (n_steps, d1, P)
    stepper = _Stepper(c, dom, grid.h)
    u = np.repeat(u0[:, None], P, axis=1)
    times, frames = [0.0], [u.copy()]
    for n in range(n_steps):
        t = n * dt
        u = stepper(u, t, dt, dW[n])
        if observer is not None:
            observer((n + 1) * dt, u)
        if (n + 1) % grid.record_every == 0 or n + 1 == n_steps:
            times.append((n + 1) * dt)
            frames.append(u.copy())
    return pack(times, frames, dt)


def solve(problem: SpdeProblem, grid: GridSpec, noise: WienerPath | None) -> GridSolution:
    return solve_ensemble(problem, grid, [] if noise is None else [noise])[0]


def energy_norms(sol: GridSolution) -> dict:
    """Discrete ``sup |u|`` and ``int_0^T int |Du|^2 dx dt``."""
    v = np.asarray(sol.values)
    if v.size == 0:
        return {"sup_norm": 0.0, "l2_h1_seminorm": 0.0}
    sup = float(np.max(np.abs(v)))
    shape = sol.lattice.shape
    field_ = v.reshape((v.shape[0],) + tuple(shape))
    dens = np.zeros(v.shape[0])
    for ax in range(len(shape)):
        diff = np.diff(field_, axis=ax + 1) / sol.h
        dens += np.sum(diff**2, axis=tuple(range(1, len(shape) + 1))) * sol.h ** len(shape)
    if len(sol.times) < 2:
        return {"sup_norm": sup, "l2_h1_seminorm": 0.0}
    integral = float(np.sum(0.5 * (dens[1:] + dens[:-1]) * np.diff(sol.times)))
    return {"sup_norm": sup, "l2_h1_seminorm": integral}


def write_solution_csv(sol: GridSolution, dest) -> None:
    """Rows ``(t, x[, y], u)`` for every recorded time and lattice node."""
    nodes = sol.nodes
    cols = ["t", "x"] if nodes.shape[1] == 1 else ["t", "x", "y"]
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ["u"])
        for t, row in zip(sol.times, sol.values):
            for p, u in zip(nodes, row):
                w.writerow([repr(float(t))] + [repr(float(q)) for q in p] + [repr(float(u))])


def solution_manifest(sol: GridSolution) -> dict:
    return {
        "seed": sol.seed,
        "stream": sol.stream,
        "replica": sol.replica,
        "domain": {
            "kind": sol.domain.kind,
            "lo": sol.domain.lo,
            "hi": sol.domain.hi,
            "center": list(sol.domain.center),
            "radius": sol.domain.radius,
        },
        "grid": {"h": sol.h, "dt": sol.dt, "n_times": len(sol.times)},
        **{k: v for k, v in sol.meta.items() if k not in ("h", "dt")},
    }

"""Interval and disk domains with exact boundary distance, and their lattices."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp

__all__ = ["Domain", "Lattice", "lattice", "smooth_step"]


def smooth_step(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1."""
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class Domain:
    """Bounded C^1 domain: an interval ``(lo, hi)`` or a disk.

    ``boundary_distance`` is the signed distance to the boundary, positive
    inside.  ``extension_radius`` sets ``G+ = G + B_ext``, outside of which
    the coefficients are cut off.
    """

    kind: str
    lo: float = 0.0
    hi: float = 1.0
    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    extension_radius: float = 1.0

    @classmethod
    def interval(cls, lo=0.0, hi=1.0, extension_radius=1.0):
        if not hi > lo:
            raise ValueError(f"empty interval ({lo}, {hi})")
        return cls("interval", lo=float(lo), hi=float(hi), extension_radius=extension_radius)

    @classmethod
    def disk(cls, center=(0.0, 0.0), radius=1.0, extension_radius=1.0):
        if not radius > 0:
            raise ValueError("disk radius must be positive")
        return cls(
            "disk",
            center=tuple(float(c) for c in center),
            radius=float(radius),
            extension_radius=extension_radius,
        )

    @property
    def dim(self) -> int:
        return 1 if self.kind == "interval" else 2

    @property
    def diam(self) -> float:
        return self.hi - self.lo if self.kind == "interval" else 2.0 * self.radius

    def boundary_distance(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "interval":
            x = x[..., 0]
            return np.minimum(x - self.lo, self.hi - x)
        return self.radius - np.linalg.norm(x - np.asarray(self.center), axis=-1)

    def inside(self, x):
        return self.boundary_distance(x) > 0

    def support_cutoff(self, x):
        """1 on ``G + B_{ext/2}``, 0 outside ``G + B_ext``, smooth between."""
        s = -self.boundary_distance(x)
        half = 0.5 * self.extension_radius
        return 1.0 - smooth_step((s - half) / half)

    def outward_normal(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "interval":
            mid = 0.5 * (self.lo + self.hi)
            return np.where(x[..., :1] < mid, -1.0, 1.0)
        v = x - np.asarray(self.center)
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        return v / np.where(n > 0, n, 1.0)

    def bounding_box(self, pad=0.0):
        if self.kind == "interval":
            return np.array([[self.lo - pad, self.hi + pad]])
        c = np.asarray(self.center)
        return np.stack([c - self.radius - pad, c + self.radius + pad], axis=1)


@dataclass(frozen=True, eq=False)
class Lattice:
    """Uniform lattice over a domain with cut-cell difference operators.

    ``nodes`` covers the bounding box; ``interior`` marks nodes strictly
    inside.  Operators act on the vector of interior values with the
    Dirichlet value 0 imposed at the true boundary position.
    """

    domain: Domain
    h: float
    shape: tuple
    nodes: np.ndarray

    @cached_property
    def distance(self):
        return self.domain.boundary_distance(self.nodes)

    @cached_property
    def interior(self):
        return self.distance > 1e-12 * self.h

    @cached_property
    def interior_index(self):
        return np.flatnonzero(self.interior)

    @property
    def n_interior(self):
        return self.interior_index.size

    @cached_property
    def interior_nodes(self):
        return self.nodes[self.interior_index]

    def _arm(self, axis, sign):
        """Neighbour index (or -1) and arm length along ``sign * e_axis``."""
        shape = self.shape
        grid_index = np.arange(int(np.prod(shape))).reshape(shape)
        idx = self.interior_index
        multi = np.unravel_index(idx, shape)
        nb = list(multi)
        nb[axis] = nb[axis] + sign
        valid = (nb[axis] >= 0) & (nb[axis] < shape[axis])
        nb[axis] = np.clip(nb[axis], 0, shape[axis] - 1)
        nb_flat = grid_index[tuple(nb)]
        inside = valid & self.interior[nb_flat]
        arm = np.full(idx.size, self.h)
        cut = ~inside
        if np.any(cut):
            arm[cut] = self._cut_length(self.nodes[idx[cut]], axis, sign)
        pos = np.full(self.interior.size, -1)
        pos[self.interior_index] = np.arange(self.n_interior)
        return np.where(inside, pos[nb_flat], -1), arm

    def _cut_length(self, p, axis, sign):
        dom = self.domain
        if dom.kind == "interval":
            x = p[:, 0]
            return np.minimum(np.where(sign > 0, dom.hi - x, x - dom.lo), self.h)
        q = p - np.asarray(dom.center)
        b = sign * q[:, axis]
        c = np.sum(q * q, axis=1) - dom.radius**2
        s = -b + np.sqrt(np.maximum(b * b - c, 0.0))
        return np.clip(s, 1e-12 * self.h, self.h)

    @cached_property
    def arms(self):
        return {
            (ax, sg): self._arm(ax, sg) for ax in range(self.domain.dim) for sg in (-1, 1)
        }

    def second_derivative(self, axis):
        """Shortley-Weller approximation of D_axis D_axis."""
        n = self.n_interior
        (jm, hm), (jp, hp) = self.arms[(axis, -1)], self.arms[(axis, 1)]
        rows = np.arange(n)
        cm = 2.0 / (hm * (hm + hp))
        cp = 2.0 / (hp * (hm + hp))
        diag = -(cm + cp)
        r = [rows, rows[jm >= 0], rows[jp >= 0]]
        c = [rows, jm[jm >= 0], jp[jp >= 0]]
        v = [diag, cm[jm >= 0], cp[jp >= 0]]
        return sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), (n, n))

    def first_derivative(self, axis):
        """Centred difference with the boundary value 0 at the cut position."""
        n = self.n_interior
        (jm, hm), (jp, hp) = self.arms[(axis, -1)], self.arms[(axis, 1)]
        rows = np.arange(n)
        w = 1.0 / (hm + hp)
        r = [rows[jp >= 0], rows[jm >= 0]]
        c = [jp[jp >= 0], jm[jm >= 0]]
        v = [w[jp >= 0], -w[jm >= 0]]
        return sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), (n, n))

    def mixed_derivative(self):
        """Four-point D_0 D_1 with exterior corner values clamped to 0."""
        n = self.n_interior
        shape = self.shape
        pos = np.full(self.interior.size, -1)
        pos[self.interior_index] = np.arange(n)
        multi = np.unravel_index(self.interior_index, shape)
        grid_index = np.arange(int(np.prod(shape))).reshape(shape)
        rows, cols, vals = [], [], []
        for s0, s1, w in ((1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)):
            i0, i1 = multi[0] + s0, multi[1] + s1
            ok = (i0 >= 0) & (i0 < shape[0]) & (i1 >= 0) & (i1 < shape[1])
            flat = grid_index[np.clip(i0, 0, shape[0] - 1), np.clip(i1, 0, shape[1] - 1)]
            j = np.where(ok, pos[flat], -1)
            keep = j >= 0
            rows.append(np.arange(n)[keep])
            cols.append(j[keep])
            vals.append(np.full(keep.sum(), w / (4.0 * self.h**2)))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), (n, n)
        )

    @cached_property
    def operators(self):
        d = self.domain.dim
        ops = {"D": [self.first_derivative(i) for i in range(d)]}
        ops["DD"] = [[None] * d for _ in range(d)]
        for i in range(d):
            ops["DD"][i][i] = self.second_derivative(i)
        if d == 2:
            ops["DD"][0][1] = ops["DD"][1][0] = self.mixed_derivative()
        return ops

    def full(self, interior_values):
        """Scatter interior values into a full lattice vector (zeros outside)."""
        interior_values = np.asarray(interior_values)
        out = np.zeros(interior_values.shape[:-1] + (self.nodes.shape[0],))
        out[..., self.interior_index] = interior_values
        return out


@lru_cache(maxsize=32)
def lattice(domain: Domain, h: float) -> Lattice:
    if domain.kind == "interval":
        n = (domain.hi - domain.lo) / h
        if abs(n - round(n)) > 1e-9 * n:
            raise ValueError(f"h={h} does not divide the interval length")
        n = int(round(n))
        x = domain.lo + (domain.hi - domain.lo) * np.arange(n + 1) / n
        return Lattice(domain, float(h), (n + 1,), x[:, None])
    m = int(np.ceil(domain.radius / h))
    ax = np.arange(-m, m + 1) * h
    X, Y = np.meshgrid(domain.center[0] + ax, domain.center[1] + ax, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
    return Lattice(domain, float(h), (2 * m + 1, 2 * m + 1), nodes)

"""Reproducible Brownian paths on dyadic grids.

Every Gaussian used here is a pure function of
``(master_seed, stream_id, level, component, index)``: a Philox counter-based
generator is keyed by ``(seed, stream, level, component)`` and the normal at
``index`` is the inverse-CDF transform of the 64-bit word at that counter
position.  Paths are built by the Levy midpoint construction, so refining a
path only ever inserts values and never touches existing ones.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

__all__ = [
    "NoiseParameterError",
    "WienerPath",
    "ensemble",
    "generate_path",
    "generate_paths",
    "refine_path",
    "oscillation",
    "keyed_normals",
    "keyed_uniforms",
    "write_path",
    "read_path",
]

_MASK64 = (1 << 64) - 1
_HEADER = struct.Struct("<dqqQQ")


class NoiseParameterError(ValueError):
    pass


def _key(seed: int, stream: int, level: int, component: int) -> np.ndarray:
    ss = np.random.SeedSequence(
        [int(seed) & _MASK64, int(stream) & _MASK64, int(level), int(component)]
    )
    return ss.generate_state(2, dtype=np.uint64)


def _raw_words(key: np.ndarray, start: int, count: int) -> np.ndarray:
    # Philox4x64 emits 4 words per counter step; advance() counts steps.
    bg = np.random.Philox(key=key)
    block, offset = divmod(int(start), 4)
    if block:
        bg.advance(block)
    words = bg.random_raw(count + offset)
    return words[offset:]


def keyed_uniforms(seed, stream, level, component, start, count):
    """Uniforms in (0, 1) at counter positions ``start .. start+count-1``."""
    words = _raw_words(_key(seed, stream, level, component), start, count)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def keyed_normals(seed, stream, level, component, start, count):
    """Standard normals at counter positions ``start .. start+count-1``."""
    return ndtri(keyed_uniforms(seed, stream, level, component, start, count))


@dataclass(frozen=True)
class WienerPath:
    """A ``d1``-component Brownian path sampled at ``T * k / 2**level``."""

    T: float
    level: int
    values: np.ndarray = field(repr=False)
    seed: int = 0
    stream: int = 0
    replica: int = 0

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def d1(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1] - 1

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.T * np.arange(self.n_steps + 1) / self.n_steps

    def at_level(self, level: int) -> np.ndarray:
        """Values subsampled to the coarser dyadic grid of depth ``level``."""
        if not 0 <= level <= self.level:
            raise NoiseParameterError(f"level {level} outside [0, {self.level}]")
        return self.values[:, :: 2 ** (self.level - level)]

    def increments(self, level: int | None = None) -> np.ndarray:
        """Increments, shape ``(n_steps, d1)``, on the grid of depth ``level``."""
        v = self.at_level(self.level if level is None else level)
        return np.diff(v, axis=1).T

    def value_at(self, t):
        """Grid value at the nearest grid time, flat before 0 and after T."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.T)
        idx = np.rint(t / self.dt).astype(int)
        return self.values[:, idx]


def _check(d1, L, T):
    if L < 0:
        raise NoiseParameterError(f"level must be >= 0, got {L}")
    if d1 < 1:
        raise NoiseParameterError(f"d1 must be >= 1, got {d1}")
    if not T > 0:
        raise NoiseParameterError(f"horizon must be > 0, got {T}")


def _contiguous_runs(replicas):
    runs, start = [], 0
    for i in range(1, len(replicas) + 1):
        if i == len(replicas) or replicas[i] != replicas[i - 1] + 1:
            runs.append((start, i))
            start = i
    return runs


def _levy_levels(values, seed, stream, T, first, last, replicas):
    """Insert midpoints for levels ``first+1 .. last`` into ``values``.

    ``values`` has shape ``(n_rep, d1, 2**first + 1)``; replica ``r`` reads the
    counter range ``[r*n_mid, (r+1)*n_mid)`` at each level.
    """
    n_rep, d1, _ = values.shape
    runs = _contiguous_runs(replicas)
    for level in range(first + 1, last + 1):
        n_mid = 2 ** (level - 1)
        z = np.empty((n_rep, d1, n_mid))
        for k in range(d1):
            for a, b in runs:
                z[a:b, k] = keyed_normals(
                    seed, stream, level, k, replicas[a] * n_mid, (b - a) * n_mid
                ).reshape(b - a, n_mid)
        mid = 0.5 * (values[..., :-1] + values[..., 1:]) + np.sqrt(T / n_mid / 4.0) * z
        out = np.empty((n_rep, d1, 2 * n_mid + 1))
        out[..., 0::2] = values
        out[..., 1::2] = mid
        values = out
    return values


def generate_paths(seed, stream, d1, L, T, replicas) -> np.ndarray:
    """Array ``(len(replicas), d1, 2**L + 1)`` of independent paths.

    Replica ``r`` is the same path no matter which other replicas are
    generated alongside it, so work can be split across workers freely.
    """
    _check(d1, L, T)
    replicas = [int(r) for r in replicas]
    n_rep = len(replicas)
    values = np.zeros((n_rep, d1, 2))
    for k in range(d1):
        for a, b in _contiguous_runs(replicas):
            values[a:b, k, 1] = np.sqrt(T) * keyed_normals(
                seed, stream, 0, k, replicas[a], b - a
            )
    return _levy_levels(values, seed, stream, T, 0, L, replicas)


def generate_path(seed: int, stream: int, d1: int, L: int, T: float) -> WienerPath:
    values = generate_paths(seed, stream, d1, L, T, [0])[0]
    return WienerPath(T=float(T), level=int(L), values=values, seed=seed, stream=stream)


def refine_path(path: WienerPath, extra_levels: int) -> WienerPath:
    """Brownian-bridge refinement by ``extra_levels`` dyadic levels."""
    if extra_levels < 0:
        raise NoiseParameterError(f"extra_levels must be >= 0, got {extra_levels}")
    if extra_levels == 0:
        return path
    values = _levy_levels(
        np.array(path.values)[None],
        path.seed,
        path.stream,
        path.T,
        path.level,
        path.level + extra_levels,
        [path.replica],
    )[0]
    return WienerPath(
        T=path.T,
        level=path.level + extra_levels,
        values=values,
        seed=path.seed,
        stream=path.stream,
        replica=path.replica,
    )


def ensemble(seed, stream, d1, L, T, replicas) -> list[WienerPath]:
    arr = generate_paths(seed, stream, d1, L, T, replicas)
    return [
        WienerPath(T=float(T), level=int(L), values=arr[j], seed=seed, stream=stream, replica=r)
        for j, r in enumerate(replicas)
    ]


def oscillation(values, times, s: float, t: float) -> float:
    """max - min of a scalar path over the grid points in ``[s, t]``.

    Before ``times[0]`` the path is taken to be flat at ``values[0]``.
    """
    values = np.asarray(values)
    times = np.asarray(times)
    if s > t:
        raise NoiseParameterError(f"empty interval [{s}, {t}]")
    tol = 1e-12 * max(1.0, abs(times[-1]))
    if t < times[0] - tol:
        return 0.0
    lo = np.searchsorted(times, max(s, times[0]) - tol, side="left")
    hi = np.searchsorted(times, t + tol, side="right")
    if hi <= lo:
        raise NoiseParameterError(f"interval [{s}, {t}] contains no grid point")
    seg = values[lo:hi]
    return float(seg.max() - seg.min())


def write_path(path: WienerPath, dest) -> None:
    """Binary dump: little-endian header then doubles, component-major."""
    with open(dest, "wb") as fh:
        fh.write(
            _HEADER.pack(path.T, path.level, path.d1, path.seed & _MASK64, path.stream & _MASK64)
        )
        fh.write(np.ascontiguousarray(path.values, dtype="<f8").tobytes())


def read_path(src) -> WienerPath:
    raw = Path(src).read_bytes()
    T, L, d1, seed, stream = _HEADER.unpack_from(raw)
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(d1, 2**L + 1)
    return WienerPath(T=T, level=L, values=values.copy(), seed=seed, stream=stream)

"""Configuration-driven experiment runs with reproducible manifests.

Each experiment kind has a flat schema of typed parameters with defaults.
``run_experiment`` validates a parameter map, dispatches to the owning
module, writes CSV/JSON outputs and returns a manifest with 64-bit blake2b
digests of every output file.  ``build_report`` aggregates manifests into
one CSV and one SVG per table.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .boundary import FitError, bootstrap_ordering, fit_boundary_exponent, krylov_experiment, krylov_threshold
from .boundary import shell_decay_profile
from .feynman_kac import FKQuery, calibrate_factor, heat_characteristics, heat_oracle, mc_value
from .flows import composition_residual, integrate_forward, integrate_point_ensemble, invert_point
from .geometry import Domain
from .hitting import HittingExperiment, run_hitting_mc
from .noise import ensemble, generate_path, generate_paths
from .spde import CoefficientSet, GridSpec, SpdeProblem, bump, constant_coefficients, energy_norms
from .spde import solve_ensemble, write_solution_csv
from .sqrt_law import empirical_pi, flow_normalized_counts

__all__ = [
    "ConfigError",
    "KINDS",
    "SCHEMAS",
    "validate",
    "load_config",
    "load_pilot",
    "run_experiment",
    "build_report",
    "digest",
    "shell_coefficients",
    "sine_flow_coefficients",
    "run_shells",
    "solve_paths",
]


class ConfigError(ValueError):
    pass


# name -> (type, default, choices or None); "floats"/"ints" are lists
SCHEMAS = {
    "krylov": {
        "lam": ("floats", [0.1, 0.3], None),
        "control": ("bool", True, None),
        "n_paths": ("int", 120, None),
        "h": ("float", 1 / 512, None),
        "level": ("int", 12, None),
        "fine_level": ("int", 18, None),
        "lookback": ("float", 1 / 16, None),
        "x_max": ("float", 4.0, None),
        "window_cells": ("ints", [1, 8], None),
        "n_boot": ("int", 2000, None),
    },
    "sqrtlaw": {
        "n": ("int", 16, None),
        "cs": ("floats", [1.0, 2.0, 4.0, 8.0], None),
        "n_paths": ("int", 200, None),
        "extra_levels": ("int", 2, None),
        "flow_paths": ("int", 0, None),
        "flow_h": ("float", 1 / 32, None),
        "probe_times": ("floats", [0.5, 0.75, 1.0], None),
        "probe_points": ("floats", [-0.5, 0.3, 1.2], None),
    },
    "hitting": {
        "p": ("int", 0, None),
        "r": ("float", 7.0, None),
        "c": ("float", 1.0, None),
        "d": ("int", 1, None),
        "n_paths": ("int", 100_000, None),
        "dt": ("float", 2.0**-10, None),
        "compare_p": ("int", -1, None),
    },
    "flow": {
        "sigma": ("str", "sine", ("zero", "constant", "linear", "sine")),
        "m": ("float", 1.0, None),
        "level": ("int", 10, None),
        "h": ("float", 1 / 64, None),
        "lo": ("float", -2.0, None),
        "hi": ("float", 3.0, None),
        "record_every": ("int", 64, None),
        "n_paths": ("int", 2000, None),
        "slope_levels": ("ints", [8, 9, 10, 11, 12], None),
    },
    "solve": {
        "a": ("float", 1.0, None),
        "sigma": ("float", 0.0, None),
        "psi": ("str", "sine", ("sine", "bump")),
        "T": ("float", 0.1, None),
        "h": ("float", 1 / 256, None),
        "level": ("int", 9, None),
        "n_paths": ("int", 1, None),
        "record_every": ("int", 64, None),
    },
    "fk": {
        "problem": ("str", "heat", ("heat", "stationary")),
        "t": ("float", 0.1, None),
        "xs": ("floats", [0.5], None),
        "n_paths": ("int", 100_000, None),
        "steps": ("int", 256, None),
        "calibration_paths": ("int", 100_000, None),
    },
    "shells": {
        "n_paths": ("int", 50, None),
        "h": ("float", 1 / 512, None),
        "level": ("int", 16, None),
        "T": ("float", 1.0, None),
        "T0": ("float", 0.5, None),
        "r0": ("float", 0.5, None),
        "j_min": ("int", 6, None),
        "j_max": ("int", 12, None),
        "sigma_mean": ("float", 0.8, None),
        "sigma_amp": ("float", 0.2, None),
        "batch": ("int", 25, None),
    },
}

KINDS = tuple(SCHEMAS)


def _coerce(kind, name, spec, value):
    typ, _, choices = spec
    where = f"{kind}.{name}"
    if typ == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if typ == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if typ == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{where}: expected a finite number")
        return float(value)
    if typ == "str":
        if not isinstance(value, str) or (choices and value not in choices):
            raise ConfigError(f"{where}: expected one of {list(choices)}")
        return value
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{where}: expected a non-empty list")
    scalar = ("int", None, None) if typ == "ints" else ("float", None, None)
    return [_coerce(kind, f"{name}[{i}]", scalar, v) for i, v in enumerate(value)]


def validate(kind, params) -> dict:
    """Defaults merged with ``params``; ``ConfigError`` names the offending field."""
    if kind not in SCHEMAS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {list(KINDS)}")
    schema = SCHEMAS[kind]
    out = {}
    for name, value in params.items():
        if name == "kind":
            if value != kind:
                raise ConfigError(f"{kind}.kind: config is for {value!r}")
            continue
        if name not in schema:
            raise ConfigError(f"{kind}.{name}: unknown field")
        out[name] = _coerce(kind, name, schema[name], value)
    for name, (_, default, _) in schema.items():
        out.setdefault(name, default)
    wc = out.get("window_cells")
    if wc is not None and not (len(wc) == 2 and 0 < wc[0] < wc[1]):
        raise ConfigError(f"{kind}.window_cells: expected [lo, hi] with 0 < lo < hi")
    for name in ("n_paths", "flow_paths", "n_boot", "calibration_paths", "steps", "batch", "record_every"):
        if name in out and out[name] < (0 if name == "flow_paths" else 1):
            raise ConfigError(f"{kind}.{name}: must be positive")
    return out


def load_config(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def load_pilot() -> dict:
    """Pilot-run thresholds shipped with the package."""
    return json.loads(resources.files("spdelab").joinpath("data/pilot.json").read_text())


def digest(path) -> str:
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return "" if v is None else v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class _Outcome:
    files: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def check(self, name, ok, **detail):
        self.checks[name] = {"pass": bool(ok), **_jsonable(detail)}


# -- shared model builders ----------------------------------------------------


def shell_coefficients(sigma_mean=0.8, sigma_amp=0.2, psi=None):
    """``a = 1``, ``sigma(x) = s0 + s1 cos(2 pi x)`` on (0, 1) with a bump initial condition."""
    s0, s1 = float(sigma_mean), float(sigma_amp)
    return CoefficientSet(
        d=1,
        d1=1,
        a=lambda t, x: np.ones(x.shape[:-1] + (1, 1)),
        sigma=lambda t, x: (s0 + s1 * np.cos(2 * np.pi * x))[..., None],
        dsigma=lambda t, x: (-2 * np.pi * s1 * np.sin(2 * np.pi * x))[..., None, None],
        psi=(lambda x: bump(x[..., 0])) if psi is None else psi,
        name="cosine-loading",
        params={"sigma_mean": s0, "sigma_amp": s1},
    )


def sine_flow_coefficients(m=1.0, k=1.0):
    """``sigma(x) = m sin(k x)`` in one dimension."""
    return CoefficientSet(
        d=1,
        d1=1,
        a=lambda t, x: np.ones(x.shape[:-1] + (1, 1)),
        sigma=lambda t, x: (m * np.sin(k * x))[..., None],
        dsigma=lambda t, x: (m * k * np.cos(k * x))[..., None, None],
        psi=lambda x: 0 * x[..., 0],
        name="sine",
        params={"m": m, "k": k},
    )


def _groups(n, workers):
    return [g for g in np.array_split(np.arange(n), max(1, int(workers))) if len(g)]


def _pmap(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def solve_paths(problem, grid, seed, replicas, stream=0, batch=25, workers=1, reducer=None):
    """Grid solutions for the given replicas, solved in batches.

    ``reducer(sol)`` is applied to each solution as soon as its batch is
    done, so large ensembles need not be kept in memory.
    """
    replicas = list(replicas)
    L = grid.level
    batches = [replicas[a : a + batch] for a in range(0, len(replicas), batch)]

    def work(reps):
        W = ensemble(seed, stream, problem.coeffs.d1, L, problem.T, reps)
        sols = solve_ensemble(problem, grid, W)
        return [s if reducer is None else reducer(s) for s in sols]

    return [x for part in _pmap(work, batches, workers) for x in part]


def run_shells(p, seed, workers=1):
    """Shell profiles for the cosine-loading problem; one entry per path."""
    c = shell_coefficients(p["sigma_mean"], p["sigma_amp"])
    prob = SpdeProblem(Domain.interval(0.0, 1.0), c, p["T"])
    rec = max(1, 2 ** p["level"] // 1024)
    grid = GridSpec(p["h"], p["level"], record_every=rec)
    js = range(p["j_min"], p["j_max"] + 1)
    return solve_paths(
        prob, grid, seed, range(p["n_paths"]), batch=p["batch"], workers=workers,
        reducer=lambda s: shell_decay_profile(s, p["T0"], p["r0"], js),
    )


# -- runners ------------------------------------------------------------------


def _run_krylov(p, seed, out, workers):
    o = _Outcome()
    common = dict(
        h=p["h"], level=p["level"], n_paths=p["n_paths"], seed=seed, x_max=p["x_max"],
        window=(p["window_cells"][0] * p["h"], p["window_cells"][1] * p["h"]), workers=workers,
    )
    reports = [
        krylov_experiment(lam, fine_level=p["fine_level"], lookback=p["lookback"], **common)
        for lam in sorted(p["lam"])
    ]
    if p["control"]:
        reports.append(krylov_experiment(None, control=True, **common))
    rows = []
    for rep in reports:
        lam = "control" if rep.lam is None else rep.lam
        for i, f in enumerate(rep.fits):
            rows.append([lam, i, rep.sample_times[i], rep.alpha[i], None if f is None else f.r2,
                         rep.window[0], rep.window[1]])
    _write_csv(out / "alpha.csv", ["lambda", "path_id", "t", "alpha_hat", "r2", "window_lo", "window_hi"], rows)
    o.files.append("alpha.csv")
    o.summary["runs"] = [rep.summary() for rep in reports]
    o.summary["thresholds"] = {str(lam): krylov_threshold(lam) for lam in sorted(p["lam"])}
    lam_reports = [r for r in reports if r.lam is not None]
    for lo, hi in zip(lam_reports, lam_reports[1:]):
        p_order, p_ceiling = bootstrap_ordering(lo.alpha, hi.alpha, n_boot=p["n_boot"], seed=seed, paired=True)
        name = f"ordering_{lo.lam:g}_{hi.lam:g}"
        o.summary[name] = {"p_order": p_order, "p_below_one": p_ceiling}
        o.check(name, p_order >= 0.95 and p_ceiling >= 0.95, p_order=p_order, p_below_one=p_ceiling)
    if p["control"]:
        med = reports[-1].median
        o.check("control_median", abs(med - 1.0) <= 0.1, median=med)
    return o


def _run_sqrtlaw(p, seed, out, workers):
    o = _Outcome()
    n, cs = p["n"], sorted(p["cs"])
    reps = empirical_pi(seed, 0, p["n_paths"], cs, n, extra_levels=p["extra_levels"])
    rows = [[i, c, n, int(round(reps[c].ratios[i] * (n + 1))), reps[c].ratios[i]]
            for c in cs for i in range(p["n_paths"])]
    _write_csv(out / "ratios.csv", ["path_id", "c", "n", "N_n", "ratio"], rows)
    o.files.append("ratios.csv")
    means = [reps[c].mean for c in cs]
    o.summary["ensemble"] = [reps[c].summary() for c in cs]
    o.check("strictly_decreasing", all(a > b for a, b in zip(means, means[1:])), means=means)
    pilot = load_pilot()["sqrtlaw"]
    if n == pilot["n"]:
        for c in cs:
            key = f"{c:g}"
            if key in pilot["mean_threshold"]:
                thr = pilot["mean_threshold"][key]
                o.check(f"mean_c{key}_below_pilot", reps[c].mean <= thr, mean=reps[c].mean, threshold=thr)
    if p["flow_paths"]:
        coeffs = sine_flow_coefficients()
        probes = [(t, (x,)) for t in p["probe_times"] for x in p["probe_points"]]
        hf = p["flow_h"]
        pts = np.arange(-5.0, 5.0 + hf / 2, hf)[:, None]

        def one(i):
            W = generate_path(seed, 1 + i, 1, n, 1.0)
            flow = integrate_forward(coeffs, W, pts, n, lattice_shape=(len(pts),), h=hf)
            r, flagged = flow_normalized_counts(flow, cs, n, probes, refine=False)
            return [r[c].ratios[0] for c in cs], len(flagged)

        res = _pmap(one, list(range(p["flow_paths"])), workers)
        frows = [[i, c, res[i][0][j]] for i in range(len(res)) for j, c in enumerate(cs)]
        _write_csv(out / "flow_ratios.csv", ["path_id", "c", "ratio"], frows)
        o.files.append("flow_ratios.csv")
        fmax = {f"{c:g}": max(r[0][j] for r in res) for j, c in enumerate(cs)}
        o.summary["flow_max_ratio"] = fmax
        o.summary["flow_flagged"] = sum(r[1] for r in res)
        env = pilot.get("flow_envelope", {})
        if all(k in env for k in fmax):
            ok = all(fmax[k] <= env[k] for k in fmax) and o.summary["flow_flagged"] == 0
            o.check("flow_within_envelope", ok, flow_max=fmax, envelope={k: env[k] for k in fmax})
    _write_json(out / "summary.json", o.summary)
    o.files.append("summary.json")
    return o


def _run_hitting(p, seed, out, workers):
    o = _Outcome()
    d = p["d"]
    nvec = tuple(-1.0 if i == 0 else 0.0 for i in range(d))
    start = (0.0, tuple(0.0 for _ in range(d)))

    def mc(level):
        exp = HittingExperiment(
            level, p["r"], p["c"], nvec, start, p["n_paths"], p["dt"] * 2.0**-level,
            seed=seed, stream=level, workers=workers,
        )
        return run_hitting_mc(exp)

    res = {p["p"]: mc(p["p"])}
    if p["compare_p"] >= 0:
        res[p["compare_p"]] = mc(p["compare_p"])
    rows = [[p["c"], p["r"], lev, d, 1.0, 1.0, p["n_paths"], r.p_not_through_A, r.standard_error, seed]
            for lev, r in sorted(res.items())]
    header = ["c", "r", "p", "d", "delta", "Delta", "n_paths", "p_not_through_A", "se", "seed"]
    _write_csv(out / "hitting.csv", header, rows)
    o.files.append("hitting.csv")
    main = res[p["p"]]
    o.summary = {"estimate": main.p_not_through_A, "se": main.standard_error}
    pilot = load_pilot()["hitting"]
    if d == 1 and p["c"] == pilot["c"] and p["r"] == pilot["r"]:
        oracle = pilot["oracle"]
        o.summary["oracle"] = oracle
        o.check("oracle_3se", abs(main.p_not_through_A - oracle) < 3 * main.standard_error,
                estimate=main.p_not_through_A, se=main.standard_error, oracle=oracle)
        bound = 1.0 - pilot["margin"]
        o.check("below_one_by_margin", main.p_not_through_A < bound, estimate=main.p_not_through_A, bound=bound)
    if p["compare_p"] >= 0:
        a, b = res[p["p"]], res[p["compare_p"]]
        se = math.hypot(a.standard_error, b.standard_error)
        o.check("rescaling", abs(a.p_not_through_A - b.p_not_through_A) < 3 * se,
                difference=a.p_not_through_A - b.p_not_through_A, se=se)
    _write_json(out / "summary.json", o.summary)
    o.files.append("summary.json")
    return o


def _flow_coeffs(p):
    m = p["m"]
    psi = lambda x: 0 * x[..., 0]
    if p["sigma"] == "zero":
        return constant_coefficients([[1.0]], [[0.0]], psi, name="zero")
    if p["sigma"] == "constant":
        return constant_coefficients([[1.0]], [[m]], psi, name="constant", m=m)
    if p["sigma"] == "linear":
        return CoefficientSet(
            d=1, d1=1, a=lambda t, x: np.ones(x.shape[:-1] + (1, 1)),
            sigma=lambda t, x: m * x[..., None], dsigma=lambda t, x: np.full(x.shape + (1, 1), m),
            psi=psi, name="linear", params={"m": m},
        )
    return sine_flow_coefficients(m)


def _run_flow(p, seed, out, workers):
    o = _Outcome()
    c = _flow_coeffs(p)
    W = generate_path(seed, 0, 1, p["level"], 1.0)
    h = p["h"]
    pts = np.arange(p["lo"], p["hi"] + h / 2, h)[:, None]
    flow = integrate_forward(c, W, pts, record_every=p["record_every"], lattice_shape=(len(pts),), h=h)
    rows = [[t, flow.points[i, 0], flow.X[k, i, 0], flow.J[k, i, 0, 0]]
            for k, t in enumerate(flow.times) for i in range(len(pts))]
    _write_csv(out / "flow.csv", ["t", "x0", "X", "J00"], rows)
    o.files.append("flow.csv")
    lo, hi = flow.X[-1].min(), flow.X[-1].max()
    targets = np.linspace(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo), 21)[:, None]
    y = invert_point(flow, 1.0, targets)
    X, _ = flow.evaluate(y, flow.steps[-1])
    newton = float(np.max(np.abs(X - targets)))
    o.summary["newton_residual"] = newton
    o.check("newton_round_trip", newton <= 1e-10 * flow.diam, residual=newton, tol=1e-10 * flow.diam)
    comp = composition_residual(c, W, pts, 0.0, 0.5, 1.0, lattice_shape=(len(pts),))
    o.summary["composition_residual"] = comp
    if p["sigma"] in ("zero", "constant"):
        o.check("composition_exact", comp <= 1e-12 * flow.diam, residual=comp)
    if p["sigma"] == "linear":
        L = max(p["slope_levels"])
        paths = generate_paths(seed, 1, 1, L, 1.0, range(p["n_paths"]))
        exact = np.exp(-p["m"] * paths[:, 0, -1] - 0.5 * p["m"] ** 2)
        errs = []
        for lev in p["slope_levels"]:
            _, J = integrate_point_ensemble(c, paths, [1.0], lev)
            errs.append(float(np.mean(np.abs(J[:, 0, 0] - exact))))
        dts = [2.0**-lev for lev in p["slope_levels"]]
        slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
        o.summary["jacobian_errors"] = errs
        o.summary["jacobian_slope"] = slope
        o.check("jacobian_strong_order", 0.4 <= slope <= 0.6, slope=slope)
    _write_json(out / "summary.json", o.summary)
    o.files.append("summary.json")
    return o


def _run_solve(p, seed, out, workers):
    o = _Outcome()
    dom = Domain.interval(0.0, 1.0)
    psi = (lambda x: np.sin(np.pi * x[..., 0])) if p["psi"] == "sine" else (lambda x: bump(x[..., 0]))
    c = constant_coefficients([[p["a"]]], [[p["sigma"]]], psi, name="constant")
    prob = SpdeProblem(dom, c, p["T"])
    grid = GridSpec(p["h"], p["level"], record_every=p["record_every"])
    sols = solve_paths(prob, grid, seed, range(p["n_paths"]), workers=workers)
    write_solution_csv(sols[0], out / "solution.csv")
    norms = [energy_norms(s) for s in sols]
    _write_csv(out / "norms.csv", ["path_id", "sup_norm", "l2_h1_seminorm"],
               [[i, e["sup_norm"], e["l2_h1_seminorm"]] for i, e in enumerate(norms)])
    o.files += ["solution.csv", "norms.csv"]
    o.summary["sup_norm_mean"] = float(np.mean([e["sup_norm"] for e in norms]))
    if p["sigma"] == 0 and p["psi"] == "sine":
        x = sols[0].nodes[:, 0]
        exact = np.exp(-p["a"] * np.pi**2 * p["T"]) * np.sin(np.pi * x)
        err = float(np.max(np.abs(sols[0].values[-1] - exact)))
        try:
            alpha = fit_boundary_exponent(sols[0], p["T"]).alpha
        except FitError:
            alpha = float("nan")
        o.summary.update(oracle_error=err, boundary_exponent=alpha)
        o.check("heat_oracle", err <= 1e-3, error=err)
        o.check("boundary_exponent", abs(alpha - 1.0) <= 0.1, alpha=alpha)
    _write_json(out / "summary.json", o.summary)
    o.files.append("summary.json")
    return o


def _run_fk(p, seed, out, workers):
    o = _Outcome()
    factor, table = calibrate_factor(n_paths=p["calibration_paths"], seed=seed, stream=1)
    o.summary["calibration"] = {"factor": factor, "table": {f"{k:g}": v for k, v in table.items()}}
    o.check("calibration", factor == 2.0, factor=factor)
    dom = Domain.interval(0.0, 1.0)
    if p["problem"] == "heat":
        c = constant_coefficients([[1.0]], [[0.0]], lambda x: np.sin(np.pi * x[..., 0]))
        oracle = lambda x: heat_oracle(p["t"], x)
    else:
        c = constant_coefficients([[1.0]], [[0.0]], lambda x: 0 * x[..., 0],
                                  f=lambda t, x, y, z: 1.0 + 0 * y)
        oracle = lambda x: x * (1 - x) / 2
    chars = heat_characteristics(dom, c, factor=factor)
    rows = []
    for i, x in enumerate(p["xs"]):
        r = mc_value(FKQuery(chars, p["t"], (x,), p["n_paths"], p["t"] / p["steps"], seed, 2 + i,
                             workers=workers))
        rows.append([p["t"], x, r.estimate, r.standard_error, r.n_paths, seed])
        o.check(f"oracle_x{x:g}", abs(r.estimate - oracle(x)) < 3 * r.standard_error,
                estimate=r.estimate, se=r.standard_error, oracle=oracle(x))
    _write_csv(out / "fk.csv", ["probe_t", "probe_x", "estimate", "se", "n_paths", "seed"], rows)
    o.files.append("fk.csv")
    _write_json(out / "summary.json", o.summary)
    o.files.append("summary.json")
    return o


def _run_shells_kind(p, seed, out, workers):
    o = _Outcome()
    profiles = run_shells(p, seed, workers)
    rows = [[i, j, m] for i, pr in enumerate(profiles) for j, m in zip(pr.j, pr.M)]
    _write_csv(out / "shells.csv", ["path_id", "j", "M_j"], rows)
    ratios = np.array([pr.ratio for pr in profiles])
    _write_csv(out / "ratios.csv", ["path_id", "ratio", "alpha"],
               [[i, pr.ratio, pr.alpha] for i, pr in enumerate(profiles)])
    o.files += ["shells.csv", "ratios.csv"]
    o.summary = {
        "n_paths": len(profiles),
        "median_ratio": float(np.median(ratios)),
        "max_ratio": float(ratios.max()),
        "min_alpha": float(-2 * np.log2(ratios.max())),
    }
    pilot = load_pilot()["shells"]
    o.check("uniform_ratio_below_pilot", ratios.max() < pilot["threshold"],
            max_ratio=ratios.max(), threshold=pilot["threshold"])
    o.check("positive_exponent", o.summary["min_alpha"] > 0, min_alpha=o.summary["min_alpha"])
    _write_json(out / "summary.json", o.summary)
    o.files.append("summary.json")
    return o


_RUNNERS = {
    "krylov": _run_krylov,
    "sqrtlaw": _run_sqrtlaw,
    "hitting": _run_hitting,
    "flow": _run_flow,
    "solve": _run_solve,
    "fk": _run_fk,
    "shells": _run_shells_kind,
}


def run_experiment(kind, params, seed, out, workers=1, config_path=None) -> dict:
    """Validate, run, write outputs and ``manifest.json``; returns the manifest."""
    p = validate(kind, params)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed: expected an unsigned 64-bit integer")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    o = _RUNNERS[kind](p, seed, out, workers)
    if kind == "krylov":
        _write_json(out / "summary.json", o.summary)
        o.files.append("summary.json")
    wall = time.perf_counter() - t0
    manifest = {
        "kind": kind,
        "artifact_version": __version__,
        "seed": seed,
        "config": p,
        "config_path": None if config_path is None else str(config_path),
        "workers": workers,
        "wall_time_s": wall,
        "checks": o.checks,
        "outputs": {name: digest(out / name) for name in o.files},
        "summary": o.summary,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


# -- report -------------------------------------------------------------------

_TABLES = {
    "krylov": ("krylov", ["lambda", "n_paths", "median_alpha", "q10_alpha", "threshold"]),
    "sqrtlaw": ("sqrtlaw", ["c", "n", "n_paths", "mean_ratio", "q95_ratio"]),
    "hitting": ("hitting", ["c", "r", "p", "d", "p_not_through_A", "se"]),
    "flow": ("flow", ["sigma", "m", "newton_residual", "composition_residual", "jacobian_slope"]),
    "solve": ("solve", ["sigma", "h", "T", "sup_norm_mean", "oracle_error"]),
    "fk": ("fk", ["probe_t", "probe_x", "estimate", "se", "n_paths"]),
    "shells": ("shells", ["n_paths", "median_ratio", "max_ratio", "min_alpha"]),
}


def _rows_from_manifest(man, base):
    kind, s, cfg = man["kind"], man["summary"], man["config"]
    if kind == "krylov":
        rows = {"krylov": [], "krylov_control": []}
        for run in s["runs"]:
            row = [run["lambda"], run["n_paths"], run["median_alpha"], run["q10_alpha"], run["threshold"]]
            rows["krylov_control" if run["lambda"] is None else "krylov"].append(row)
        return rows
    if kind == "sqrtlaw":
        return {"sqrtlaw": [[e["c"], e["n"], e["n_paths"], e["mean"], e["q95"]] for e in s["ensemble"]]}
    if kind == "hitting":
        with open(base / "hitting.csv") as fh:
            recs = list(csv.DictReader(fh))
        return {"hitting": [[float(r["c"]), float(r["r"]), int(r["p"]), int(r["d"]),
                             float(r["p_not_through_A"]), float(r["se"])] for r in recs]}
    if kind == "flow":
        return {"flow": [[cfg["sigma"], cfg["m"], s["newton_residual"], s["composition_residual"],
                          s.get("jacobian_slope")]]}
    if kind == "solve":
        return {"solve": [[cfg["sigma"], cfg["h"], cfg["T"], s["sup_norm_mean"], s.get("oracle_error")]]}
    if kind == "fk":
        with open(base / "fk.csv") as fh:
            recs = list(csv.DictReader(fh))
        return {"fk": [[float(r["probe_t"]), float(r["probe_x"]), float(r["estimate"]), float(r["se"]),
                        int(r["n_paths"])] for r in recs]}
    if kind == "shells":
        return {"shells": [[s["n_paths"], s["median_ratio"], s["max_ratio"], s["min_alpha"]]]}
    raise KeyError(kind)


def _sort_key(row):
    return tuple((0, v) if isinstance(v, (int, float)) and v is not None else (1, str(v)) for v in row)


def build_report(out, manifests) -> dict:
    """One CSV and SVG per table from the given manifest paths.

    Unreadable or malformed manifests become entries in ``errors``; the
    remaining manifests are still reported.
    """
    from .plotting import plot_table

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tables, errors, sources = {}, [], []
    for path in manifests:
        path = Path(path)
        try:
            with open(path) as fh:
                man = json.load(fh)
            rows = _rows_from_manifest(man, path.parent)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            errors.append({"manifest": str(path), "error": f"{type(exc).__name__}: {exc}"})
            continue
        sources.append(str(path))
        for name, rs in rows.items():
            tables.setdefault(name, []).extend(rs)
    written = []
    for name in sorted(tables):
        rows = sorted(tables[name], key=_sort_key)
        if not rows:
            continue
        header = _TABLES.get(name.split("_")[0], (None, None))[1]
        if name == "krylov_control":
            header = _TABLES["krylov"][1]
        _write_csv(out / f"{name}.csv", header, rows)
        plot_table(name, header, rows, out / f"{name}.svg")
        written.append({"table": name, "rows": len(rows), "csv": f"{name}.csv", "svg": f"{name}.svg"})
    summary = {"manifests": sources, "tables": written, "errors": errors}
    _write_json(out / "summary.json", summary)
    return summary

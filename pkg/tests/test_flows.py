import dataclasses

import numpy as np
import pytest

from spdelab.flows import (
    FlowDegeneracyError,
    InversionError,
    chaining_terms,
    composition_residual,
    integrate_forward,
    integrate_point_ensemble,
    invert_point,
    inverse_path_1d,
    residual_increment_exponent,
    sqrt_psd,
    transformed_coefficients,
    write_flow_csv,
)
from spdelab.geometry import Domain
from spdelab.noise import generate_path, generate_paths
from spdelab.spde import CoefficientSet, constant_coefficients
from spdelab.transform import solve_transformed_1d, transformation_gap

PSI = lambda x: np.sin(np.pi * x[..., 0])


def _scalar(sig, dsig, a=1.0):
    return CoefficientSet(
        d=1, d1=1,
        a=lambda t, x: np.full(x.shape[:-1] + (1, 1), a),
        sigma=lambda t, x: sig(x)[..., None],
        dsigma=lambda t, x: dsig(x)[..., None, None],
        psi=PSI,
    )


def _linear(m):
    return _scalar(lambda x: m * x, lambda x: m + 0 * x)


def _sine(s=1.0, k=1.0):
    return _scalar(lambda x: s * np.sin(k * x), lambda x: s * k * np.cos(k * x))


def _line(lo=-2.0, hi=3.0, h=1 / 64):
    pts = np.arange(lo, hi + h / 2, h)[:, None]
    return pts, dict(lattice_shape=(len(pts),), h=h)


def test_zero_sigma_identity():
    c = constant_coefficients([[1.0]], [[0.0]], PSI)
    pts, kw = _line()
    flow = integrate_forward(c, generate_path(0, 0, 1, 8, 1.0), pts, **kw)
    assert np.all(flow.X == pts) and np.all(flow.J == 1.0)


def test_constant_sigma_exact_shift():
    c = constant_coefficients(np.eye(2), [[0.3], [-0.5]], PSI)
    W = generate_path(1, 0, 1, 8, 1.0)
    pts = np.random.default_rng(0).uniform(-1, 1, (20, 2))
    flow = integrate_forward(c, W, pts, record_every=32)
    for i, k in enumerate(flow.steps):
        w = W.values[0, k]
        assert np.allclose(flow.X[i], pts - np.array([0.3, -0.5]) * w, atol=1e-14)
    assert np.all(flow.J == np.eye(2))


def test_initial_state_identity():
    pts, kw = _line()
    flow = integrate_forward(_sine(), generate_path(2, 0, 1, 6, 1.0), pts, start=0.25, **kw)
    assert flow.times[0] == 0.25
    assert np.array_equal(flow.X[0], pts) and np.all(flow.J[0] == 1.0)


def test_linear_jacobian_strong_order():
    m, n_paths = 1.0, 2000
    paths = generate_paths(21, 0, 1, 12, 1.0, range(n_paths))
    exact = np.exp(-m * paths[:, 0, -1] - 0.5 * m * m)
    dts, errs = [], []
    for L in range(8, 13):
        _, J = integrate_point_ensemble(_linear(m), paths, [1.0], L)
        errs.append(np.mean(np.abs(J[:, 0, 0] - exact)))
        dts.append(2.0**-L)
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 0.4 <= slope <= 0.6


def test_jacobian_matches_finite_differences():
    h = 1e-3
    pts, kw = _line(-1.0, 1.0, h)
    flow = integrate_forward(_sine(), generate_path(3, 0, 1, 13, 1.0), pts, record_every=2**13, **kw)
    X = flow.X[-1][:, 0]
    fd = np.gradient(X, h)[1:-1]
    J = flow.J[-1][1:-1, 0, 0]
    assert np.max(np.abs(fd - J) / np.abs(J)) < 1e-2


def test_degenerate_flow_detected():
    c = _linear(40.0)
    with pytest.raises(FlowDegeneracyError):
        integrate_forward(c, generate_path(0, 0, 1, 4, 1.0), np.array([[1.0]]))


def test_inversion_examples():
    pts, kw = _line()
    W = generate_path(4, 0, 1, 8, 1.0)
    zero = constant_coefficients([[1.0]], [[0.0]], PSI)
    f0 = integrate_forward(zero, W, pts, **kw)
    tg = np.array([[0.1], [0.7]])
    assert np.array_equal(invert_point(f0, 1.0, tg), tg)
    const = constant_coefficients([[1.0]], [[0.4]], PSI)
    fc = integrate_forward(const, W, pts, **kw)
    w = W.values[0, -1]
    assert np.allclose(invert_point(fc, 1.0, tg), tg + 0.4 * w, atol=1e-12)


def test_newton_round_trip_general_sigma():
    pts, kw = _line()
    flow = integrate_forward(_sine(0.9, 2.0), generate_path(5, 0, 1, 10, 1.0), pts, record_every=64, **kw)
    tg = np.linspace(0.05, 0.95, 19)[:, None]
    for t in (flow.times[3], 1.0):
        y = invert_point(flow, t, tg)
        X, _ = flow.evaluate(y, flow.steps[flow.index_of(t)])
        assert np.max(np.abs(X - tg)) <= 1e-10 * flow.diam


def test_inverse_path_and_errors():
    pts, kw = _line()
    flow = integrate_forward(_sine(), generate_path(6, 0, 1, 8, 1.0), pts, **kw)
    y = inverse_path_1d(flow, 0.5)
    X, _ = flow.evaluate(y[:, None], flow.steps)
    assert np.max(np.abs(X[:, 0] - 0.5)) < 1e-10
    with pytest.raises(InversionError):
        inverse_path_1d(flow, 50.0)
    with pytest.raises(ValueError):
        flow.index_of(0.5 + 1e-4)


def test_inversion_2d_round_trip():
    c = CoefficientSet(
        d=2, d1=2,
        a=lambda t, x: np.eye(2),
        sigma=lambda t, x: 0.4 * np.stack(
            [np.stack([np.sin(x[..., 1]), 0 * x[..., 0]], -1),
             np.stack([0 * x[..., 0], np.cos(x[..., 0])], -1)], -2),
        psi=PSI,
    )
    pts = np.random.default_rng(1).uniform(-1, 1, (50, 2))
    flow = integrate_forward(c, generate_path(7, 0, 2, 8, 1.0), pts, record_every=256)
    tg = pts[:10] * 0.5
    y = invert_point(flow, 1.0, tg)
    X, _ = flow.evaluate(y, flow.steps[-1])
    assert np.max(np.linalg.norm(X - tg, axis=1)) <= 1e-10 * flow.diam


def test_sqrt_psd():
    m = np.array([[2.0, 0.5], [0.5, 1.0]])
    r = sqrt_psd(m)
    assert np.allclose(r @ r.T, m, atol=1e-14) and np.allclose(r, r.T)


def test_transformed_zero_sigma():
    c = CoefficientSet(
        d=1, d1=1, a=lambda t, x: (1 + x**2)[..., None], sigma=lambda t, x: 0 * x[..., None],
        psi=PSI, f=lambda t, x, y, z: np.cos(x[..., 0]) + 0 * y,
    )
    pts, kw = _line()
    flow = integrate_forward(c, generate_path(0, 0, 1, 6, 1.0), pts, **kw)
    tc = transformed_coefficients(c, flow)
    assert np.allclose(tc.alpha[..., 0, 0], 1 + pts[:, 0] ** 2)
    assert np.all(tc.beta == 0)
    assert np.allclose(tc.phi, np.cos(pts[:, 0]))


def test_transformed_constant_sigma():
    c = CoefficientSet(
        d=1, d1=1, a=lambda t, x: (2 + np.sin(x))[..., None], sigma=lambda t, x: np.full(x.shape + (1,), 0.5),
        psi=PSI,
    )
    W = generate_path(1, 0, 1, 6, 1.0)
    pts, kw = _line()
    tc = transformed_coefficients(c, integrate_forward(c, W, pts, **kw))
    assert np.all(tc.Sigma == 0) and np.all(tc.beta == 0)
    w = W.values[0][:, None]
    assert np.allclose(tc.alpha[..., 0, 0], 2 + np.sin(pts[:, 0] - 0.5 * w) - 0.125, atol=1e-12)


def test_transformed_linear_sigma_closed_form():
    m = 0.5
    c = _linear(m)
    W = generate_path(8, 0, 1, 14, 1.0)
    pts, kw = _line(0.2, 1.0, 1 / 64)
    flow = integrate_forward(c, W, pts, record_every=2**12, **kw)
    tc = transformed_coefficients(c, flow)
    t, w = flow.times[-1], W.values[0, -1]
    X = pts[:, 0] * np.exp(-m * w - 0.5 * m * m * t)
    abar = 1 - 0.5 * (m * X) ** 2
    closed = np.exp(2 * m * w + m * m * t) * abar
    assert np.allclose(tc.alpha[-1, :, 0, 0], closed, rtol=2e-2)
    assert np.max(np.abs(flow.hessian(len(flow.times) - 1))) < 1e-10


def test_rho_validation():
    c = _sine()
    pts, kw = _line()
    flow = integrate_forward(c, generate_path(0, 0, 1, 4, 1.0), pts, **kw)
    with pytest.raises(ValueError):
        transformed_coefficients(c, flow, rho=lambda t, x: np.ones(x.shape + (1,)) * 5)


def test_composition_residuals():
    W = generate_path(9, 0, 1, 10, 1.0)
    pts, kw = _line(-1, 2, 1 / 128)
    zero = constant_coefficients([[1.0]], [[0.0]], PSI)
    const = constant_coefficients([[1.0]], [[0.8]], PSI)
    args = (W, pts, 0.0, 0.5, 1.0)
    assert composition_residual(zero, *args, lattice_shape=kw["lattice_shape"]) == 0.0
    assert composition_residual(const, *args, lattice_shape=kw["lattice_shape"]) <= 1e-12 * 3
    assert composition_residual(_sine(), *args, outer="exact") == 0.0


def test_composition_interpolation_error_is_second_order():
    W = generate_path(10, 0, 1, 10, 1.0)
    res = []
    for h in (1 / 32, 1 / 64, 1 / 128):
        pts, kw = _line(-2, 3, h)
        res.append(composition_residual(_sine(), W, pts, 0.0, 0.5, 1.0, lattice_shape=kw["lattice_shape"]))
    rate = np.log2(res[0] / res[1]), np.log2(res[1] / res[2])
    assert min(rate) > 1.7


def _all_pairs(n, stride):
    return [(a, b) for a in range(0, n, stride) for b in range(a + 1, n, stride)]


def test_residual_exponent_exact_cancellation():
    W = generate_path(11, 0, 1, 8, 1.0)
    pts, kw = _line()
    for sig in (0.0, 0.7):
        c = constant_coefficients([[1.0]], [[sig]], PSI)
        flow = integrate_forward(c, W, pts, **kw)
        fit = residual_increment_exponent(flow, _all_pairs(len(flow.times), 16))
        assert fit.exact_cancellation and fit.exponent is None


def test_residual_exponent_sine():
    W = generate_path(12, 0, 1, 12, 1.0)
    pts, kw = _line(-1, 2, 1 / 32)
    flow = integrate_forward(_sine(), W, pts, **kw)
    pairs = [(a, a + 2**k) for k in range(0, 10) for a in range(0, 2**12 - 2**k, 2**k * 8)]
    fit = residual_increment_exponent(flow, pairs)
    assert fit.exponent >= 0.85


def test_chaining_inequality():
    W = generate_path(13, 0, 1, 10, 1.0)
    pts, kw = _line(-1, 2, 1 / 32)
    flow = integrate_forward(_sine(1.0, 2.0), W, pts, record_every=8, **kw)
    rng = np.random.default_rng(0)
    for _ in range(200):
        s, r, t = np.sort(rng.integers(0, len(flow.times), 3))
        dst, dsr, drt, e = chaining_terms(flow, s, r, t)
        assert dst <= dsr + drt + e + 1e-12


def test_flow_csv(tmp_path):
    pts, kw = _line(0, 1, 0.5)
    flow = integrate_forward(_sine(), generate_path(0, 0, 1, 2, 1.0), pts, **kw)
    write_flow_csv(flow, tmp_path / "f.csv")
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert rows[0] == "t,x0,X,J00" and len(rows) == 1 + 5 * 3


def test_transformation_constant_sigma_small():
    c = constant_coefficients([[1.0]], [[1.0]], PSI)
    probes = np.array([0.2, 0.35, 0.5, 0.65, 0.8])
    u, v = transformation_gap(c, Domain.interval(0, 1), generate_path(0, 0, 1, 9, 0.25), 0.25, 9, 1 / 64, probes)
    assert np.max(np.abs(u - v)) < 2e-2


def test_beta_sign_discriminates():
    # general sigma: the grid solution agrees with the derived drift, not with the flipped Hessian term
    c = _sine(0.6, 3.0)
    dom = Domain.interval(0, 1)
    T, L, h = 0.25, 10, 1 / 128
    W = generate_path(1, 0, 1, L, T)
    probes = np.array([0.2, 0.35, 0.5, 0.65, 0.8])
    u, v = transformation_gap(c, dom, W, T, L, h, probes, pad=1.0)
    pts, kw = _line(-1, 2, h)
    flow = integrate_forward(c, W, pts, L, **kw)
    tc = transformed_coefficients(c, flow)
    H = flow.hessian()[..., 0, 0, 0]
    flipped = -(tc.Sigma[..., 0] - tc.alpha[..., 0, 0] * H) / flow.J[..., 0, 0]
    tc_bad = dataclasses.replace(tc, beta=flipped[..., None])
    v_bad = solve_transformed_1d(dom, c.psi, flow, tc_bad, h / 2, probes)
    good, bad = np.max(np.abs(u - v)), np.max(np.abs(u - v_bad))
    assert good < 5e-3 and bad > 5 * good

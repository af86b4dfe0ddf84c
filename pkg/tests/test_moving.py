import numpy as np

from spdelab.moving import MovingLattice, gradient, sample_on_interval, solve_moving_interval
from spdelab.noise import generate_paths


def _const(val):
    return lambda t, y: np.full(y.shape, val)


def test_static_interval_heat_decay():
    h, n = 1 / 128, 2000
    dt = 0.1 / n
    lat = MovingLattice(np.array([0.0]), h, 129)
    left, right = np.zeros((n + 1, 1)), np.ones((n + 1, 1))
    v0 = np.sin(np.pi * lat.y)
    _, frames = solve_moving_interval(lat, left, right, v0, dt, _const(1.0))
    exact = np.exp(-np.pi**2 * 0.1) * np.sin(np.pi * lat.y)
    assert np.max(np.abs(frames[-1] - exact)) < 1e-3


def test_drift_term_against_closed_form():
    # w_t = w_yy + c w_y on (0, 1): e^{-c y / 2} sin(pi y) decays at rate pi^2 + c^2 / 4
    h, n, c = 1 / 128, 2000, 0.5
    dt = 0.1 / n
    lat = MovingLattice(np.array([0.0]), h, 129)
    w0 = np.exp(-c * lat.y / 2) * np.sin(np.pi * lat.y)
    fixed = np.zeros((n + 1, 1)), np.ones((n + 1, 1))
    _, f = solve_moving_interval(lat, *fixed, w0, dt, _const(1.0), beta=_const(c))
    exact = np.exp(-(np.pi**2 + c * c / 4) * 0.1) * w0
    assert np.max(np.abs(f[-1] - exact)) < 1e-3


def test_translating_interval_equals_drift_in_moving_coordinates():
    # v_t = v_yy on (c t, 1 + c t) is w(t, y - c t) with w_t = w_zz + c w_z on (0, 1)
    h, n, c = 1 / 128, 2000, 0.5
    dt = 0.1 / n
    t = dt * np.arange(n + 1)
    lat = MovingLattice(np.array([-0.25]), h, 200)
    _, fv = solve_moving_interval(
        lat, (c * t)[:, None], (1 + c * t)[:, None], np.sin(np.pi * np.clip(lat.y, 0, 1)), dt, _const(1.0)
    )
    lat2 = MovingLattice(np.array([0.0]), h, 129)
    fixed = np.zeros((n + 1, 1)), np.ones((n + 1, 1))
    _, fw = solve_moving_interval(lat2, *fixed, np.sin(np.pi * lat2.y), dt, _const(1.0), beta=_const(c))
    z = np.array([[0.3, 0.55, 0.8]])
    got = sample_on_interval(lat, fv[-1], [c * 0.1], [1 + c * 0.1], z + c * 0.1)[0]
    ref = sample_on_interval(lat2, fw[-1], [0.0], [1.0], z)[0]
    assert np.allclose(got, ref, atol=5e-3)


def test_nonnegative_for_nonnegative_data_on_random_intervals():
    P, L = 6, 10
    W = generate_paths(3, 0, 1, L, 1.0, range(P))[:, 0]
    s = np.sqrt(1.9)
    left, right = (s * W).T, (s * W + 1).T
    h = 1 / 64
    lo = np.floor((left.min(axis=0) - 2 * h) / h) * h
    M = int(np.ceil((right.max() - lo.min()) / h)) + 4
    lat = MovingLattice(lo, h, M)
    v0 = np.where((lat.y > 0.2) & (lat.y < 0.8), 1.0, 0.0)
    _, frames = solve_moving_interval(lat, left, right, v0, 1.0 / 2**L, _const(0.05), record_every=64)
    for f in frames:
        assert np.all(f >= 0)


def test_gradient_exact_for_quadratics_with_cut_cells():
    h = 0.1
    lat = MovingLattice(np.array([0.0]), h, 12)
    left, right = np.array([0.03]), np.array([0.97])
    arms = lat.arms(left, right)
    v = np.where(arms[0], (lat.y - 0.03) * (0.97 - lat.y), 0.0)
    g = gradient(v, arms)
    exact = 1.0 - 2 * lat.y
    assert np.allclose(g[arms[0]], exact[arms[0]], atol=1e-12)


def test_window_solver_independent_of_padding():
    P, L = 3, 8
    W = generate_paths(5, 0, 1, L, 1.0, range(P))[:, 0]
    left, right = W.T, W.T + 1
    h = 1 / 32
    lo = np.floor((left.min(axis=0) - 2 * h) / h) * h
    M = int(np.ceil((right.max() - lo.min()) / h)) + 4
    v0 = lambda lat: np.sin(np.pi * np.clip(lat.y - lo[:, None], 0, 1)) ** 2
    a = MovingLattice(lo, h, M)
    b = MovingLattice(lo - 10 * h, h, M + 30)
    _, fa = solve_moving_interval(a, left, right, v0(a), 1 / 2**L, _const(0.5))
    _, fb = solve_moving_interval(b, left, right, np.where(b.y >= lo[:, None], v0(b), 0), 1 / 2**L, _const(0.5))
    assert np.allclose(fa[-1], fb[-1][:, 10 : 10 + M], atol=1e-14)

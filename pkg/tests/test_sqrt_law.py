import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdelab.flows import integrate_forward
from spdelab.noise import generate_path, generate_paths
from spdelab.spde import CoefficientSet, constant_coefficients
from spdelab.sqrt_law import (
    ResolutionError,
    count_oscillations,
    count_profile,
    empirical_pi,
    flow_normalized_counts,
    lookback_oscillations,
)


def _grid(n):
    return np.linspace(0.0, 1.0, 2**n + 1)


def test_constant_path_counts_zero():
    t = _grid(8)
    assert count_oscillations(np.full_like(t, 3.0), t, 0.1, 1.0, 8) == 0


def test_identity_path_count():
    # osc over [1 - 2^-k, 1] is 2^-k and exceeds 2^{-k/2}/4 exactly for k < 4
    t = _grid(8)
    for n in (4, 6, 8):
        assert count_oscillations(t, t, 0.25, 1.0, n) == 4


def test_time_zero_counts_zero():
    W = generate_path(0, 0, 1, 8, 1.0)
    assert count_oscillations(W.values[0], W.times, 0.01, 0.0, 8) == 0


def test_resolution_error():
    t = _grid(6)
    with pytest.raises(ResolutionError):
        count_oscillations(t, t, 1.0, 1.0, 8)


def test_lookback_matches_brute_force():
    W = generate_path(4, 0, 1, 10, 1.0)
    v, t = W.values[0], W.times
    osc = lookback_oscillations(v, 8, t[1] - t[0])
    for i in range(0, len(t), 29):
        for k in range(9):
            w = 2 ** (10 - k)
            seg = v[max(0, i - w) : i + 1]
            assert osc[k, i] == seg.max() - seg.min()


def test_profile_matches_pointwise_counts():
    W = generate_path(1, 0, 1, 12, 1.0)
    v, t = W.values[0], W.times
    prof = count_profile(v, t, 1.0, 10)
    for i in range(0, len(t), 37):
        assert prof[i] == count_oscillations(v, t, 1.0, t[i], 10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.2, 4.0))
def test_monotone_in_n_and_c(seed, c):
    W = generate_path(seed, 0, 1, 10, 1.0)
    v, t = W.values[0], W.times
    p6 = count_profile(v, t, c, 6)
    p8 = count_profile(v, t, c, 8)
    assert np.all(p6 <= p8)
    assert np.all(count_profile(v, t, 2 * c, 8) <= p8)


def test_ratio_bounds_and_c_zero():
    rep = empirical_pi(2, 0, 8, [0.0, 1.0, 100.0], 10)
    assert np.all(rep[0.0].ratios == 1.0)
    assert np.all((rep[1.0].ratios >= 0) & (rep[1.0].ratios <= 1))
    assert np.all(rep[100.0].ratios == 0.0)


def _refinement_mismatch(c, n=8, paths=6):
    mism, total = 0, 0
    for r in range(paths):
        W = generate_paths(7, 0, 1, n + 4, 1.0, [r])[0, 0]
        t4 = _grid(n + 4)
        pc = count_profile(W[::4], t4[::4], c, n)
        pf = count_profile(W, t4, c, n)[::4]
        mism += int(np.sum(pc != pf))
        total += len(pc)
    return mism / total


@pytest.mark.parametrize("c", [3.0, 4.0])
def test_refinement_stability(c):
    assert _refinement_mismatch(c) <= 0.05


@pytest.mark.xfail(strict=True, reason="grid max-min under-resolves the finest scales near c = 1, 2")
@pytest.mark.parametrize("c", [1.0, 2.0])
def test_refinement_stability_low_thresholds(c):
    assert _refinement_mismatch(c) <= 0.05


def test_flow_counts_zero_sigma():
    c = constant_coefficients([[1.0]], [[0.0]], lambda x: 0 * x[..., 0])
    W = generate_path(0, 0, 1, 8, 1.0)
    flow = integrate_forward(c, W, np.linspace(-1, 1, 41)[:, None], 8, lattice_shape=(41,), h=0.05)
    reps, flagged = flow_normalized_counts(flow, [0.5, 1.0], 8, [(1.0, (0.0,)), (0.5, (0.2,))])
    assert not flagged
    assert np.all(reps[0.5].counts == 0)


def test_flow_counts_constant_sigma_equal_brownian():
    s = 0.7
    c = constant_coefficients([[1.0]], [[s]], lambda x: 0 * x[..., 0])
    W = generate_path(3, 0, 1, 8, 1.0)
    flow = integrate_forward(c, W, np.linspace(-3, 3, 121)[:, None], 8, lattice_shape=(121,), h=0.05)
    t = 1.0
    reps, _ = flow_normalized_counts(flow, [0.25, 0.5], 8, [(t, (0.0,))])
    for cc in (0.25, 0.5):
        expect = count_oscillations(s * W.values[0], W.times, cc, t, 8)
        assert reps[cc].counts[0, 0] == expect


def test_flow_counts_sine_nested_in_c():
    c = CoefficientSet(
        d=1, d1=1, a=lambda t, x: np.ones(x.shape[:-1] + (1, 1)),
        sigma=lambda t, x: np.sin(x)[..., None],
        dsigma=lambda t, x: np.cos(x)[..., None, None],
        psi=lambda x: 0 * x[..., 0],
    )
    W = generate_path(5, 0, 1, 8, 1.0)
    flow = integrate_forward(c, W, np.linspace(-6, 6, 241)[:, None], 8, lattice_shape=(241,), h=0.05)
    probes = [(1.0, (x,)) for x in (-0.5, 0.3, 1.2)]
    reps, flagged = flow_normalized_counts(flow, [2.0, 4.0], 8, probes)
    assert not flagged
    assert np.all(reps[4.0].counts <= reps[2.0].counts)
    assert reps[4.0].ratios[0] <= reps[2.0].ratios[0]

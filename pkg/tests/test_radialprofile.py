import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twcsim.radialprofile import (
    FLAT_PROFILE, RadialProfileFitter, DiscSolutionLibrary, channel_massflow_weights, fit_profile_time,
    get_library, interpolate_channel_temps, precompute_library,
)


@pytest.fixture(scope="module")
def lib():
    return get_library()


def test_library_size(lib):
    assert len(lib.radii_normalized) >= 64
    assert len(lib.times_normalized) >= 128
    t = lib.times_normalized
    assert np.allclose(np.diff(np.log(t)), np.log(t[1] / t[0]))


def test_dirichlet_rim(lib):
    assert np.all(lib.values[:, -1] == 0.0)


def test_monotone_in_time_and_radius(lib):
    assert np.all(np.diff(lib.values, axis=0) >= -1e-12)
    assert np.all(np.diff(lib.values, axis=1) <= 1e-12)
    assert lib.values.max() == pytest.approx(1.0)


def test_early_profile_flatter(lib):
    def spread(i):
        row = lib.values[i] / lib.values[i, 0]
        return np.var(row)
    picks = [0, 20, 60, 100, lib.n_times - 1]
    v = [spread(i) for i in picks]
    assert all(a < b for a, b in zip(v, v[1:]))


def test_steady_state_parabola(lib):
    r = lib.radii_normalized
    last = lib.values[-1] / lib.values[-1, 0]
    assert np.max(np.abs(last - (1 - r**2))) < 1e-3


def test_refinement_stable():
    a = precompute_library(32, 32)
    b = precompute_library(64, 32)
    # compare on the coarse radii at matching times
    assert np.allclose(a.times_normalized, b.times_normalized)
    vb = np.array([np.interp(a.radii_normalized, b.radii_normalized, row) for row in b.values])
    assert np.max(np.abs(a.values - vb)) < 1e-3


def test_library_cache_round_trip(tmp_path, lib):
    p = tmp_path / "lib.bin"
    lib.save(p)
    back = DiscSolutionLibrary.load(p)
    assert np.array_equal(back.values, lib.values)
    assert np.array_equal(back.times_normalized, lib.times_normalized)


def test_precompute_rejects_tiny_grid():
    with pytest.raises(ValueError):
        precompute_library(8, 128)


@pytest.mark.parametrize("t_star", [45, 64, 101, 127])
def test_fit_recovers_library_time(lib, t_star):
    g = lib.shape_factors(t_star, [0, 1 / 3, 2 / 3, 1])
    measured = 612.0 - 83.0 * g
    assert fit_profile_time(lib, measured) == t_star


def test_fit_measured_row_is_optimal(lib):
    tt = (568.0, 567.0, 566.0, 537.0)
    i = fit_profile_time(lib, tt)
    errs = []
    for j in range(lib.n_times):
        g = lib.shape_factors(j, [1 / 3, 2 / 3])
        errs.append(np.abs(tt[0] + (tt[3] - tt[0]) * g - tt[1:3]).sum())
    errs = np.array(errs)
    assert errs[i] == errs.min()
    # a nearly flat interior profile sits early in the family
    assert lib.times_normalized[i] < 0.1 * lib.times_normalized[-1]


def test_fit_tie_picks_smaller_index(lib):
    i = 40
    gi = lib.shape_factors(i, [1 / 3, 2 / 3])
    gj = lib.shape_factors(i + 1, [1 / 3, 2 / 3])
    mid = 0.5 * (gi + gj)
    tt = np.array([0.0, mid[0], mid[1], 1.0])
    errs = np.array([np.abs(lib.shape_factors(j, [1 / 3, 2 / 3]) - mid).sum() for j in range(lib.n_times)])
    tied = np.flatnonzero(errs <= errs.min() + 1e-12)
    assert list(tied) == [i, i + 1]
    assert fit_profile_time(lib, tt) == i


def test_fit_degenerate_flat(lib):
    assert fit_profile_time(lib, (500.0, 510.0, 505.0, 500.0)) == FLAT_PROFILE
    assert np.all(interpolate_channel_temps(lib, FLAT_PROFILE, 500.0, 0.0, 7) == 500.0)


def test_zero_delta_uniform(lib):
    assert np.all(interpolate_channel_temps(lib, 50, 321.0, 0.0, 25) == 321.0)


def test_centre_anchor(lib):
    out = interpolate_channel_temps(lib, 50, 400.0, -120.0, 1000)
    assert out[0] == pytest.approx(400.0, abs=0.01)


def test_negative_delta_monotone(lib):
    for t in range(0, lib.n_times, 9):
        out = interpolate_channel_temps(lib, t, 400.0, -50.0, 100)
        assert np.all(np.diff(out) <= 1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 127), st.floats(-50, 1000), st.floats(-300, 300), st.integers(2, 300))
def test_channels_bounded_by_anchors(t, T, d, M):
    out = interpolate_channel_temps(get_library(), t, T, d, M)
    assert out.min() >= min(T, T + d) - 1e-9
    assert out.max() <= max(T, T + d) + 1e-9


def test_weights_small_cases():
    assert channel_massflow_weights(1).tolist() == [1.0]
    assert channel_massflow_weights(2).tolist() == [0.25, 0.75]
    assert abs(channel_massflow_weights(100).sum() - 1.0) <= 1e-12


@given(st.integers(1, 1000))
def test_weights_sum_to_one(M):
    assert abs(channel_massflow_weights(M).sum() - 1.0) <= 1e-12


def test_fitter_estimator(lib):
    X = np.array([[568.0, 567.0, 566.0, 537.0], [600.0, 590.0, 560.0, 500.0]])
    est = RadialProfileFitter(library=lib, n_channels=8).fit(X)
    assert est.profile_indices_.shape == (2,)
    temps = est.transform(X[:, [0, 3]])
    assert temps.shape == (2, 8)
    assert temps[0, 0] <= 568.0 and temps[0, -1] >= 537.0

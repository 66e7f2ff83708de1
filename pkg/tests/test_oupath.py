import math

import numpy as np
import pytest

from slowinc import oupath
from slowinc.eigen import OU_CLOCK, newell_probability, solve_eigenproblem
from slowinc.oupath import (
    GridSpec,
    WindowRangeError,
    empirical_mixing,
    estimate_small_deviation,
    iter_ou_batches,
    ou_bridge,
    simulate_ou,
    simulate_ou_at_times,
    simulate_ou_batch,
    small_deviation_table,
    window_suprema,
    window_suprema_batch,
)


def rho(tau):
    return np.exp(-0.5 * np.abs(tau))


def test_grid_snaps_up_to_step_multiple():
    g = GridSpec(1.0, 0.3)
    assert g.n_steps == 4
    assert g.snapped_end == pytest.approx(1.2)
    assert GridSpec(1.0, 0.25).n_steps == 4
    assert GridSpec(1.0, 0.25, 3).level_steps() == [0.25, 0.0625, 0.015625]
    with pytest.raises(ValueError):
        GridSpec(1.0, 0.0)
    with pytest.raises(ValueError):
        GridSpec(1.0, 0.1, 0)


def test_stationary_covariance():
    grid = GridSpec(4.0, 0.125)
    u = simulate_ou_batch(grid, 5, 0, 20_000)
    se = 4.0 / math.sqrt(20_000)
    assert np.all(np.abs(u.var(axis=0) - 1.0) < 0.05)
    for lag in (0.5, 1.0, 2.0, 4.0):
        j = int(lag / grid.step)
        cov = np.mean(u[:, 0] * u[:, j])
        assert cov == pytest.approx(math.exp(-lag / 2), abs=se)


def test_irregular_times_covariance():
    times = np.array([-1.0, 0.3, 0.35, 2.0])
    u = simulate_ou_at_times(times, 9, 0, 40_000)
    expected = rho(times[:, None] - times[None, :])
    np.testing.assert_allclose(np.cov(u.T, bias=True), expected, atol=0.03)
    with pytest.raises(ValueError):
        simulate_ou_at_times([1.0, 0.5], 9, 0, 2)


def test_batching_does_not_change_paths():
    grid = GridSpec(2.0, 0.05)
    whole = simulate_ou_batch(grid, 3, 0, 10)
    pieces = np.concatenate([b for _, _, b in iter_ou_batches(grid, 3, 10, chunk=3)])
    np.testing.assert_array_equal(whole, pieces)
    single = simulate_ou(grid, 3, path_index=7)
    np.testing.assert_array_equal(single.values, whole[7])


def test_bridge_conditional_law():
    step, m, rows = 1.0, 4, 200_000
    left, right = 0.5, -0.3
    g = np.random.default_rng(1).standard_normal((rows, m))
    inner = ou_bridge(np.full(rows, left), np.full(rows, right), step, m, g)
    s = np.arange(1, m) * step / m
    k = np.column_stack([rho(s), rho(step - s)])
    kinv = np.linalg.inv(np.array([[1.0, rho(step)], [rho(step), 1.0]]))
    mean = k @ kinv @ np.array([left, right])
    cov = rho(s[:, None] - s[None, :]) - k @ kinv @ k.T
    np.testing.assert_allclose(inner.mean(axis=0), mean, atol=4 * math.sqrt(cov.max() / rows))
    np.testing.assert_allclose(np.cov(inner.T), cov, atol=2e-3)


def test_window_suprema_snap_outward():
    grid = GridSpec(1.0, 0.25)
    values = np.array([0.0, 1.0, -2.0, 3.0, -4.0])
    path = oupath.OuPath(grid, values, 0)
    assert window_suprema(path, [(0.3, 0.6)]) == [3.0]  # nodes 0.25..0.75
    assert window_suprema(path, [(0.5, 0.5)]) == [2.0]
    with pytest.raises(WindowRangeError):
        window_suprema(path, [(0.5, 1.5)])
    with pytest.raises(ValueError):
        window_suprema(path, [(0.6, 0.3)])


def test_subsampled_grid_only_adds_hits():
    # a coarser view of the same path can only lower window suprema
    fine = GridSpec(8.0, 1 / 64)
    coarse = GridSpec(8.0, 1 / 16)
    u = simulate_ou_batch(fine, 4, 0, 200)
    windows = [(k, k + 0.8) for k in range(1, 7)]
    s_fine = window_suprema_batch(u, fine, windows)
    s_coarse = window_suprema_batch(u[:, ::4], coarse, windows)
    assert np.all(s_coarse <= s_fine)


def test_refined_levels_are_monotone_and_close_to_series():
    grid = GridSpec(2.0, 2.0**-8, 3)
    est = estimate_small_deviation(1.0, 2.0, 20_000, grid, 11)
    probs = [lvl.probability for lvl in est.per_level]
    assert all(b <= a for a, b in zip(probs, probs[1:]))
    assert est.probability == probs[-1]
    series = newell_probability(solve_eigenproblem(1.0, 8), OU_CLOCK * 2.0).probability
    assert abs(est.probability - series) <= est.half_width_ci + 0.01
    lo, hi = est.interval
    assert lo <= est.probability <= hi


def test_small_deviation_independent_of_batching(monkeypatch):
    grid = GridSpec(1.0, 2.0**-6, 2)
    a = small_deviation_table([0.8, 1.5], [0.5, 1.0], 500, grid, 2)
    monkeypatch.setattr(oupath, "_CHUNK_CELLS", 300)
    b = small_deviation_table([0.8, 1.5], [0.5, 1.0], 500, grid, 2)
    for key in a:
        assert a[key].per_level == b[key].per_level


def test_small_deviation_range_checks():
    grid = GridSpec(1.0, 0.01)
    with pytest.raises(WindowRangeError):
        small_deviation_table([1.0], [2.0], 10, grid, 0)
    with pytest.raises(ValueError):
        small_deviation_table([1.0], [0.5], 0, grid, 0)


def test_mixing_pair_correlation_matches_covariance():
    pts = empirical_mixing(20_000, [0.0, 1.0, 3.0], seed=5, pair_only=True)
    assert pts[0].correlation == pytest.approx(1.0)
    for p in pts[1:]:
        assert p.ci_low - 0.01 <= math.exp(-p.lag / 2) <= p.ci_high + 0.01


def test_mixing_dictionary_bounds_pair_and_decays():
    full = empirical_mixing(20_000, [0.5, 2.0, 6.0], seed=6)
    pair = empirical_mixing(20_000, [0.5, 2.0, 6.0], seed=6, pair_only=True)
    for f, p in zip(full, pair):
        assert f.correlation >= abs(p.correlation) - 1e-12
    corr = [f.correlation for f in full]
    assert corr[0] > corr[1] > corr[2]
    assert corr[2] < 0.15

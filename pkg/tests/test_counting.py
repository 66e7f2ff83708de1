import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slowinc.counting import (
    FunctionClass,
    TestFunction,
    borel_cantelli_check,
    classify,
    count_windows,
    counting_grid,
    decay_exponent,
    fit_sandwich,
    sigma_series,
    window_bounds,
)
from slowinc.eigen import OU_CLOCK, lambda_of
from slowinc.oupath import GridSpec, WindowRangeError


def test_power_log_values():
    f = TestFunction.power_log(2.0)
    t = np.array([math.e, math.e**3])
    np.testing.assert_allclose(f(t), [1.0, 9.0])
    np.testing.assert_allclose(f.log_f_at_exp([1.0, 3.0]), [0.0, 2 * math.log(3.0)])


def test_tabulated_interpolates_in_log_and_holds_constant():
    f = TestFunction.tabulated([10.0, 1000.0], [2.0, 8.0])
    assert f(100.0) == pytest.approx(4.0)  # geometric midpoint
    assert f(1.0) == pytest.approx(2.0)
    assert f(1e9) == pytest.approx(8.0)


@pytest.mark.parametrize(
    "t, f",
    [([1.0, 2.0], [3.0, 2.0]), ([2.0, 1.0], [1.0, 2.0]), ([1.0, 2.0], [2.0, 2.0]), ([1.0], [1.0])],
)
def test_tabulated_validation(t, f):
    with pytest.raises(ValueError):
        TestFunction.tabulated(t, f)


def test_power_log_requires_positive_c():
    with pytest.raises(ValueError):
        TestFunction.power_log(0.0)


def test_admissibility():
    thresholds = TestFunction.power_log(1.0).admissibility()
    assert set(thresholds) == {0.5, 0.1, 0.01}
    assert all(v is not None for v in thresholds.values())
    assert thresholds[0.01] >= thresholds[0.1] >= thresholds[0.5]
    fast = TestFunction.tabulated([10.0, 1e6], [10.0, 1e6])  # f(t) = t
    assert fast.admissibility()[0.5] is None


def test_decay_exponent_uses_ou_clock():
    assert decay_exponent(1.0) == pytest.approx(OU_CLOCK * 2.0)


def test_sigma_series_harmonic_at_critical_c():
    theta = decay_exponent(1.0)
    f = TestFunction.power_log(1.0 / theta)
    res = sigma_series(f, 1.0, 1000)
    assert res.diverges_hint is True
    harmonic = np.sum(1.0 / np.arange(1, 1001))
    assert res.partial_sum == pytest.approx(harmonic, rel=1e-9)


def test_sigma_series_p_series_converges():
    theta = decay_exponent(1.0)
    f = TestFunction.power_log(2.0 / theta)
    res = sigma_series(f, 1.0, 5000)
    assert res.diverges_hint is False
    assert math.pi**2 / 6 - 1e-3 < res.partial_sum < math.pi**2 / 6


def test_sigma_series_literal_exponent_override():
    f = TestFunction.power_log(1.0)
    res = sigma_series(f, 1.0, 10, exponent=lambda_of(1.0))
    assert res.exponent == lambda_of(1.0)
    assert res.partial_sum == pytest.approx(np.sum(np.arange(1, 11, dtype=float) ** -2.0))


@settings(max_examples=25, deadline=None)
@given(c=st.floats(0.05, 5.0), n=st.integers(1, 200))
def test_sigma_series_monotone_in_n(c, n):
    f = TestFunction.power_log(c)
    assert sigma_series(f, 1.0, 2 * n).partial_sum >= sigma_series(f, 1.0, n).partial_sum


def test_classify_power_log():
    theta = decay_exponent(1.0)
    assert classify(TestFunction.power_log(1.01 / theta), 1.0).verdict is FunctionClass.U
    assert classify(TestFunction.power_log(1.0 / theta), 1.0).verdict is FunctionClass.V
    assert classify(TestFunction.power_log(0.5 / theta), 1.0).certified


def test_classify_invariant_under_same_sign_barrier_change():
    f = TestFunction.power_log(3.0)  # c theta > 1 iff theta > 1/3
    zs = [0.5, 0.8, 1.0, 1.2]
    verdicts = [classify(f, z).verdict for z in zs]
    signs = [3.0 * decay_exponent(z) > 1 for z in zs]
    for v, s in zip(verdicts, signs):
        assert (v is FunctionClass.U) == s


def test_classify_tabulated_is_undecided_by_default():
    t = np.exp(np.arange(1, 41, dtype=float))
    f = TestFunction.tabulated(t, np.log(t))
    res = classify(f, 1.0)
    assert res.verdict is FunctionClass.UNDECIDED
    assert not res.certified
    assert "tail_slope" in res.diagnostics


def test_classify_tabulated_heuristic_is_uncertified():
    t = np.exp(np.arange(1, 201, dtype=float))
    theta = decay_exponent(1.0)
    steep = TestFunction.tabulated(t, np.log(t) ** (3.0 / theta))
    flat = TestFunction.tabulated(t, np.log(t) ** (0.3 / theta))
    assert classify(steep, 1.0, heuristic=True).verdict is FunctionClass.U
    assert classify(flat, 1.0, heuristic=True).verdict is FunctionClass.V
    assert not classify(steep, 1.0, heuristic=True).certified


def test_window_bounds():
    w = window_bounds(TestFunction.power_log(1.0), 3)
    np.testing.assert_allclose(w, [[1, 1], [2, 2 + math.log(2)], [3, 3 + math.log(3)]])


def test_count_windows_huge_barrier_hits_everything():
    f = TestFunction.power_log(1.0)
    rep = count_windows(f, 10.0, 20, 50, counting_grid(f, 20, 0.05), 1)
    assert np.all(rep.realized == 20)
    assert np.all(rep.per_k_hits == 1.0)


def test_count_windows_invariants():
    f = TestFunction.power_log(0.5)
    rep = count_windows(f, 1.0, 30, 100, counting_grid(f, 30, 0.02), 2)
    assert np.all(np.diff(rep.counts, axis=1) >= 0)
    assert np.all((rep.realized >= 0) & (rep.realized <= 30))
    assert np.all((rep.per_k_hits >= 0) & (rep.per_k_hits <= 1))
    np.testing.assert_array_equal(rep.events, rep.suprema <= 1.0)
    assert np.all(np.diff(rep.min_sup, axis=1) <= 0)
    assert rep.exponent == pytest.approx(decay_exponent(1.0))


def test_count_windows_rejects_short_grid():
    f = TestFunction.power_log(1.0)
    with pytest.raises(WindowRangeError):
        count_windows(f, 1.0, 10, 5, GridSpec(5.0, 0.1), 0)


def test_count_windows_deterministic():
    f = TestFunction.power_log(0.5)
    a = count_windows(f, 1.0, 10, 20, counting_grid(f, 10, 0.05), 3)
    b = count_windows(f, 1.0, 10, 20, counting_grid(f, 10, 0.05), 3)
    np.testing.assert_array_equal(a.suprema, b.suprema)


def test_fit_sandwich_exact_proportionality():
    proxy = 1.0 / np.arange(1, 51)
    s = fit_sandwich(0.3 * proxy, proxy)
    assert s.k1 == pytest.approx(0.3) and s.k2 == pytest.approx(0.3)
    assert s.ratio == pytest.approx(1.0)


def test_fit_sandwich_drops_outliers():
    proxy = np.ones(100)
    hits = np.full(100, 0.5)
    hits[:3] = [0.01, 0.99, 0.02]
    s = fit_sandwich(hits, proxy, 0.95)
    assert s.ratio == pytest.approx(1.0)
    assert s.covered >= 0.95


def test_borel_cantelli_fair_coins():
    rng = np.random.default_rng(0)
    events = rng.random((500, 10_000)) < 0.5
    rep = borel_cantelli_check(events, np.full(10_000, 0.5), checkpoints=[2500, 5000, 10_000])
    assert rep.percentiles[99] < 1.0
    assert rep.meaningful


def test_borel_cantelli_certain_events():
    rep = borel_cantelli_check(np.ones((5, 40), dtype=bool), np.ones(40))
    assert np.all(rep.ratios == 0.0)


def test_borel_cantelli_flags_growing_deviation():
    n = 400
    probs = np.full(n, 0.5)
    events = np.zeros((10, n), dtype=bool)  # zero hits: deviation grows like psi_n
    rep = borel_cantelli_check(events, probs, checkpoints=[100, 200, 400])
    assert rep.flag


def test_borel_cantelli_dimension_mismatch():
    with pytest.raises(ValueError):
        borel_cantelli_check(np.ones((3, 5), dtype=bool), np.ones(4))

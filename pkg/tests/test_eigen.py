import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy.special import erf

from slowinc.eigen import (
    OU_CLOCK,
    Barrier,
    GridTooCoarseError,
    csaki_bounds,
    finite_difference_eigenvalues,
    lambda_of,
    newell_probability,
    richardson_eigenvalues,
    solve_eigenproblem,
    write_eigen_csv,
)


def test_barrier_rejects_nonpositive():
    for z in (0.0, -1.0):
        with pytest.raises(ValueError):
            Barrier(z)


def test_hermite_exact_first_eigenvalue():
    # He_2 = x^2 - 1 vanishes at +-1 with eigenvalue 2
    assert lambda_of(1.0) == pytest.approx(2.0, rel=1e-11)


def test_hermite_exact_higher_eigenvalues():
    # He_3 has zeros 0, +-sqrt(3); He_4 has zeros +-sqrt(3 -+ sqrt(6))
    sol = solve_eigenproblem(math.sqrt(3.0), depth=2)
    assert sol.eigenvalues[1] == pytest.approx(3.0, rel=1e-10)
    sol = solve_eigenproblem(math.sqrt(3.0 + math.sqrt(6.0)), depth=3)
    assert sol.eigenvalues[2] == pytest.approx(4.0, rel=1e-10)


@pytest.mark.parametrize("z", [0.25, 0.5, 1.0, 2.0, 4.0])
def test_shooting_matches_finite_difference_oracle(z):
    sol = solve_eigenproblem(z, depth=4)
    ref = richardson_eigenvalues(z, depth=4, cells=2048)
    np.testing.assert_allclose(sol.eigenvalues, ref, rtol=1e-6)


def test_finite_difference_converges_quadratically():
    exact = 2.0
    e1 = abs(finite_difference_eigenvalues(1.0, 1, 256)[0] - exact)
    e2 = abs(finite_difference_eigenvalues(1.0, 1, 512)[0] - exact)
    assert 3.5 < e1 / e2 < 4.5


def test_frozen_eigenvalues():
    # values from the Richardson-extrapolated finite-difference oracle
    assert lambda_of(0.25) == pytest.approx(38.98045967, rel=1e-8)
    assert lambda_of(0.5) == pytest.approx(9.377771441, rel=1e-8)
    assert lambda_of(2.0) == pytest.approx(0.2429928807, rel=1e-8)
    assert lambda_of(4.0) == pytest.approx(9.930818e-4, rel=1e-6)


def test_lambda_strictly_decreasing_in_z():
    zs = [0.3, 0.6, 1.0, 1.5, 2.5]
    lams = [lambda_of(z) for z in zs]
    assert all(b < a for a, b in zip(lams, lams[1:]))


def test_small_barrier_limit():
    ratios = [lambda_of(2.0**-m) * 4 * 4.0**-m / math.pi**2 for m in range(2, 7)]
    assert all(b > a for a, b in zip(ratios, ratios[1:]))
    assert 0.9 <= lambda_of(0.05) * 4 * 0.05**2 / math.pi**2 <= 1.1


def test_eigenfunctions_orthonormal_and_nodal():
    sol = solve_eigenproblem(1.5, depth=6)
    w = np.exp(-0.5 * sol.grid**2)
    h = sol.grid_step
    gram = np.array(
        [[np.trapezoid(p * q * w, dx=h) for q in sol.eigenfunctions] for p in sol.eigenfunctions]
    )
    np.testing.assert_allclose(gram, np.eye(6), atol=1e-6)
    for k, psi in enumerate(sol.eigenfunctions):
        interior = psi[5:-5]
        assert np.count_nonzero(np.diff(np.sign(interior)) != 0) == k
        assert psi[0] == 0.0 and psi[-1] == 0.0


def test_odd_eigenfunctions_have_zero_weight():
    sol = solve_eigenproblem(1.0, depth=6)
    np.testing.assert_allclose(sol.weights[1::2], 0.0, atol=1e-8)


def test_grid_too_coarse():
    with pytest.raises(GridTooCoarseError):
        solve_eigenproblem(1.0, depth=2, grid_step=0.5)


def test_newell_parseval_limit_at_time_zero():
    # sum a_k^2 / sqrt(2 pi) -> P(|N(0,1)| < z); the series converges slowly at t=0
    z = 1.0
    target = erf(z / math.sqrt(2.0))
    sums = newell_probability(solve_eigenproblem(z, depth=40), 0.0).partial_sums
    assert np.all(np.diff(sums) >= -1e-15)
    assert sums[-1] <= target
    assert target - sums[-1] < 0.01


def test_newell_decreasing_in_time_and_last_term():
    sol = solve_eigenproblem(1.0, depth=8)
    vals = [newell_probability(sol, t).probability for t in (0.25, 0.5, 1.0, 2.0)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert newell_probability(sol, 1.0).last_term < 1e-12
    with pytest.raises(ValueError):
        newell_probability(sol, -1.0)


@pytest.mark.parametrize("z", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_csaki_corridor_contains_series(z, t):
    sol = solve_eigenproblem(z, depth=8)
    p = newell_probability(sol, t).probability
    b = csaki_bounds(z, t, sol)
    assert b.lower <= p * (1 + 1e-9)
    assert p <= b.upper
    assert (b.k1 is None) == (t < 1)


def test_csaki_constants_for_long_windows():
    b = csaki_bounds(1.0, 2.0)
    assert b.k2 == pytest.approx(1 / (1 - math.exp(-1)))
    assert b.lower == pytest.approx(b.k1 * math.exp(-2.0 * lambda_of(1.0)))


def test_lambda_cache_is_thread_safe():
    with ThreadPoolExecutor(4) as pool:
        vals = list(pool.map(lambda_of, [0.7] * 8))
    assert len(set(vals)) == 1


def test_ou_clock_is_half():
    assert OU_CLOCK == 0.5


def test_write_eigen_csv(tmp_path):
    sol = solve_eigenproblem(1.0, depth=3)
    vpath, gpath = tmp_path / "v.csv", tmp_path / "g.csv"
    write_eigen_csv(sol, vpath, gpath)
    lines = vpath.read_text().splitlines()
    assert lines[0] == "# schema: slowinc.eigen.values/1"
    assert lines[1] == "k,lambda_k,a_k"
    assert len(lines) == 5
    grid = gpath.read_text().splitlines()
    assert grid[1] == "x,psi_1,psi_2,psi_3"
    assert len(grid) == 2 + len(sol.grid)


def test_small_barrier_near_asymptote():
    # FD oracle: 246.24043706; asymptote pi^2 / (4 z^2) = 246.7401...
    lam = lambda_of(0.1)
    assert lam == pytest.approx(246.24043706, rel=1e-8)
    assert lam == pytest.approx(math.pi**2 / 0.04, rel=0.03)


def test_eigenfunction_parity():
    sol = solve_eigenproblem(1.0, depth=3)
    psi = sol.eigenfunctions
    np.testing.assert_allclose(psi[0], psi[0][::-1], atol=1e-8)
    np.testing.assert_allclose(psi[1], -psi[1][::-1], atol=1e-8)
    np.testing.assert_allclose(psi[2], psi[2][::-1], atol=1e-8)

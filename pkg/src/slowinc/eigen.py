"""Dirichlet eigenproblem for the Ornstein-Uhlenbeck generator on [-z, z].

The operator is ``psi'' - x psi'`` with ``psi(-z) = psi(z) = 0``.  Written in
self-adjoint form it reads ``(w psi')' = -lam w psi`` with the Gaussian weight
``w(x) = exp(-x**2 / 2)``, so the eigenfunctions are orthonormal in
``L^2(w dx)``.

Eigenvalues come from a shooting solver (Pruefer angle bracketing, then the
trajectory ``psi'' = x psi' - lam psi`` from the left wall).  An independent
finite-difference discretization, :func:`finite_difference_eigenvalues`, is
kept alongside as an oracle.

Time convention: the series in :func:`newell_probability` is written in the
clock of the operator above, i.e. for the unit-rate process with covariance
``exp(-|t - s|)``.  The process ``U(t) = W(e^t) e^{-t/2}`` runs at half that
speed; :data:`OU_CLOCK` converts.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import brentq

#: ``P{sup_{[0,t]} |U| < z} = newell_probability(sol, OU_CLOCK * t)`` for
#: ``U(t) = W(e^t) e^{-t/2}``, whose generator is half the operator above.
OU_CLOCK = 0.5

DEFAULT_DEPTH = 8
DEFAULT_CELLS = 1024
MIN_CELLS = 64

_RTOL = 1e-12
_ATOL = 1e-14


class EigenSolverError(RuntimeError):
    """The eigenvalue iteration failed to converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class GridTooCoarseError(ValueError):
    """The grid cannot resolve the oscillations of the requested eigenfunctions."""


@dataclass(frozen=True)
class Barrier:
    z: float

    def __post_init__(self):
        if not (self.z > 0 and math.isfinite(self.z)):
            raise ValueError(f"barrier half-width must be positive, got {self.z!r}")


@dataclass(frozen=True, eq=False)
class SturmLiouvilleSolution:
    barrier: Barrier
    eigenvalues: np.ndarray  # (K,)
    eigenfunctions: np.ndarray  # (K, cells + 1), rows sampled on `grid`
    weights: np.ndarray  # (K,) a_k = int psi_k w dx
    grid_step: float

    @property
    def depth(self) -> int:
        return len(self.eigenvalues)

    @property
    def grid(self) -> np.ndarray:
        n = self.eigenfunctions.shape[1] - 1
        return np.linspace(-self.barrier.z, self.barrier.z, n + 1)

    @property
    def lam(self) -> float:
        return float(self.eigenvalues[0])


def _as_barrier(barrier) -> Barrier:
    return barrier if isinstance(barrier, Barrier) else Barrier(float(barrier))


def _cells_for(z: float, grid_step: float | None) -> int:
    if grid_step is None:
        return DEFAULT_CELLS
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    cells = int(round(2.0 * z / grid_step))
    if cells < MIN_CELLS:
        raise GridTooCoarseError(
            f"grid_step={grid_step} gives {cells} cells on [-{z}, {z}]; need >= {MIN_CELLS}"
        )
    return cells


def _prufer_angle(z: float, lam: float) -> float:
    # Modified Pruefer variables with scale S = sqrt(lam) w:
    #   psi = S^{-1/2} rho sin(theta),  w psi' = S^{1/2} rho cos(theta),
    # so theta' = sqrt(lam) - (x / 2) sin(2 theta), theta(-z) = 0, and
    # theta(z) = k pi exactly at the k-th eigenvalue.
    root = math.sqrt(lam)

    def rhs(x, th):
        return [root - 0.5 * x * math.sin(2.0 * th[0])]

    sol = solve_ivp(rhs, (-z, z), [0.0], method="DOP853", rtol=_RTOL, atol=_ATOL)
    if not sol.success:
        raise EigenSolverError(f"Pruefer integration failed: {sol.message}", float("nan"))
    return float(sol.y[0, -1])


def _shoot(z: float, lam: float, x_eval: np.ndarray) -> np.ndarray:
    def rhs(x, y):
        return [y[1], x * y[1] - lam * y[0]]

    sol = solve_ivp(
        rhs, (-z, z), [0.0, 1.0], method="DOP853", t_eval=x_eval, rtol=_RTOL, atol=_ATOL
    )
    if not sol.success:
        raise EigenSolverError(f"shooting integration failed: {sol.message}", float("nan"))
    return sol.y[0]


def _kth_eigenvalue(z: float, k: int, lower: float) -> float:
    # Root-find in mu = sqrt(lam), where theta(z) is close to linear.  One
    # step of pi / (2z) in mu advances theta(z) by roughly pi.
    target = k * math.pi

    def g(mu):
        return _prufer_angle(z, mu * mu) - target

    step = math.pi / (2.0 * z)
    lo = max(math.sqrt(lower), 1e-12)
    if g(lo) >= 0:
        raise EigenSolverError(f"lower bracket for eigenvalue {k} is not below the root", g(lo))
    hi = lo + step
    for _ in range(1000):
        if g(hi) > 0:
            break
        lo, hi = hi, hi + step
    else:
        raise EigenSolverError(f"could not bracket eigenvalue {k}", g(hi))
    mu, info = brentq(g, lo, hi, xtol=1e-15, rtol=1e-15, full_output=True)
    if not info.converged:
        raise EigenSolverError(f"eigenvalue {k} did not converge", g(mu))
    return mu * mu


def _sign_changes(v: np.ndarray) -> int:
    s = np.sign(v)
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def _trapezoid(y: np.ndarray, h: float) -> float:
    return float(h * (y.sum() - 0.5 * (y[0] + y[-1])))


def solve_eigenproblem(barrier, depth: int = DEFAULT_DEPTH, grid_step: float | None = None):
    """Return the ``depth`` smallest eigenpairs for the barrier ``z``.

    Eigenfunctions are sampled on a uniform grid of step ``grid_step``
    (default: 1024 cells on ``[-z, z]``), normalized in the weighted inner
    product, and signed so that ``psi_k'(-z) > 0``.
    """
    barrier = _as_barrier(barrier)
    if depth < 1:
        raise ValueError("depth must be >= 1")
    z = barrier.z
    cells = _cells_for(z, grid_step)
    h = 2.0 * z / cells
    x = np.linspace(-z, z, cells + 1)
    w = np.exp(-0.5 * x * x)

    lams = np.empty(depth)
    psis = np.empty((depth, cells + 1))
    lower = 0.0
    for k in range(1, depth + 1):
        lam = _kth_eigenvalue(z, k, lower)
        psi = _shoot(z, lam, x)
        residual = abs(psi[-1]) / np.max(np.abs(psi))
        if residual > 1e-6:
            raise EigenSolverError(f"boundary condition not met for k={k}", residual)
        psi[0] = psi[-1] = 0.0
        zeros = _sign_changes(psi[1:-1])
        if zeros != k - 1:
            raise GridTooCoarseError(
                f"psi_{k} shows {zeros} interior zeros on {cells} cells, expected {k - 1}; refine the grid"
            )
        psi /= math.sqrt(_trapezoid(psi * psi * w, h))
        lams[k - 1] = lam
        psis[k - 1] = psi
        lower = lam

    weights = np.array([_trapezoid(p * w, h) for p in psis])
    return SturmLiouvilleSolution(barrier, lams, psis, weights, h)


def finite_difference_eigenvalues(barrier, depth: int = DEFAULT_DEPTH, cells: int = DEFAULT_CELLS):
    """Smallest eigenvalues of the conservative three-point discretization.

    ``-(w_{i+1/2}(u_{i+1}-u_i) - w_{i-1/2}(u_i-u_{i-1})) / h^2 = lam w_i u_i``
    is symmetrized by ``w^{1/2}`` and handed to a tridiagonal solver.  The
    error is ``O(h^2)`` with an even expansion, so Richardson extrapolation
    applies; see :func:`richardson_eigenvalues`.
    """
    z = _as_barrier(barrier).z
    h = 2.0 * z / cells
    x = np.linspace(-z, z, cells + 1)[1:-1]
    w = np.exp(-0.5 * x * x)
    w_half = np.exp(-0.5 * (x - 0.5 * h) ** 2)
    w_half_up = np.exp(-0.5 * (x + 0.5 * h) ** 2)
    diag = (w_half + w_half_up) / (h * h * w)
    off = -w_half_up[:-1] / (h * h * np.sqrt(w[:-1] * w[1:]))
    return eigh_tridiagonal(diag, off, select="i", select_range=(0, depth - 1), eigvals_only=True)


def richardson_eigenvalues(barrier, depth: int = DEFAULT_DEPTH, cells: int = DEFAULT_CELLS):
    coarse = finite_difference_eigenvalues(barrier, depth, cells)
    fine = finite_difference_eigenvalues(barrier, depth, 2 * cells)
    return (4.0 * fine - coarse) / 3.0


_lambda_cache: dict[float, float] = {}
_lambda_lock = threading.Lock()


def lambda_of(barrier) -> float:
    """The critical exponent lambda(z): the smallest eigenvalue, cached per ``z``."""
    z = _as_barrier(barrier).z
    hit = _lambda_cache.get(z)
    if hit is not None:
        return hit
    lam = _kth_eigenvalue(z, 1, 0.0)
    with _lambda_lock:
        return _lambda_cache.setdefault(z, lam)


@dataclass(frozen=True)
class NewellValue:
    probability: float
    last_term: float
    partial_sums: np.ndarray


def newell_probability(solution: SturmLiouvilleSolution, t: float) -> NewellValue:
    """K-term eigenfunction series for ``P{sup_{0<=s<=t} |V(s)| < z}``.

    ``V`` is the unit-rate stationary process of the operator's clock; pass
    ``OU_CLOCK * t`` for ``U``.  ``last_term`` is the magnitude of the K-th
    term, the caller's signal that the truncation is too short.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    terms = np.exp(-solution.eigenvalues * t) * solution.weights**2 / math.sqrt(2.0 * math.pi)
    partial = np.cumsum(terms)
    return NewellValue(float(min(partial[-1], 1.0)), float(terms[-1]), partial)


@dataclass(frozen=True)
class CsakiBounds:
    lower: float
    upper: float
    k1: float | None
    k2: float | None


def csaki_bounds(barrier, t: float, solution: SturmLiouvilleSolution | None = None) -> CsakiBounds:
    """Two-sided exponential bounds on the small-deviation probability.

    ``lower = a_1^2 e^{-lam t} / sqrt(2 pi)``, ``upper = e^{-lam t} / (1 - e^{-t})``.
    For ``t >= 1`` the constants ``k1 = a_1^2 / sqrt(2 pi)`` and
    ``k2 = 1 / (1 - e^{-1})`` give ``k1 e^{-lam t} <= P <= k2 e^{-lam t}``;
    they are one admissible choice, not optimal ones.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    barrier = _as_barrier(barrier)
    if solution is None:
        solution = solve_eigenproblem(barrier, depth=1)
    lam = solution.lam
    k1 = solution.weights[0] ** 2 / math.sqrt(2.0 * math.pi)
    decay = math.exp(-lam * t)
    lower = k1 * decay
    upper = decay / -math.expm1(-t)
    if t >= 1:
        return CsakiBounds(lower, upper, float(k1), 1.0 / -math.expm1(-1.0))
    return CsakiBounds(lower, upper, None, None)


def write_eigen_csv(solution: SturmLiouvilleSolution, values_path, grid_path) -> None:
    """Write ``(k, lambda_k, a_k)`` rows and the ``(x, psi_1..psi_K)`` grid."""
    with open(values_path, "w", newline="") as fh:
        fh.write("# schema: slowinc.eigen.values/1\n")
        fh.write("k,lambda_k,a_k\n")
        for k, (lam, a) in enumerate(zip(solution.eigenvalues, solution.weights), start=1):
            fh.write(f"{k},{lam:.17g},{a:.17g}\n")
    header = "x," + ",".join(f"psi_{k}" for k in range(1, solution.depth + 1))
    table = np.column_stack([solution.grid, solution.eigenfunctions.T])
    with open(grid_path, "w", newline="") as fh:
        fh.write("# schema: slowinc.eigen.grid/1\n")
        np.savetxt(fh, table, delimiter=",", header=header, comments="", fmt="%.17g")

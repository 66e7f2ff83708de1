"""Exact simulation of the stationary process ``U(t) = W(e^t) e^{-t/2}``.

``U`` is a centered Gaussian process with covariance ``exp(-|t - s| / 2)``.
On a grid of step ``d`` its transition is exact::

    U((i+1) d) = e^{-d/2} U(i d) + sqrt(1 - e^{-d}) G_i

with ``U(0) ~ N(0, 1)``, so every node has unit variance.  Sampled suprema
undercount the continuous ones; :func:`estimate_small_deviation` reports the
estimate on the base grid and on grids refined by exact Gaussian bridging
(every finer level keeps the coarser nodes), so the bias is visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from slowinc._stats import fisher_interval, wilson_half_width
from slowinc.eigen import Barrier, _as_barrier
from slowinc.streams import chunks, counter_normals, module_seed, path_rng

_SNAP = 1e-9
_CHUNK_CELLS = 8_000_000
_BRIDGE_BATCH = 1 << 18
# Intervals whose endpoints both sit this many sqrt(step) below a barrier are
# not refined: a bridge crossing has probability below exp(-2 * 6**2).
_MARGIN_SIGMAS = 6.0


class WindowRangeError(ValueError):
    """A window reaches outside the simulated grid."""


@dataclass(frozen=True)
class GridSpec:
    """Simulation grid ``0, step, ..., n_steps * step``.

    ``t_end`` is snapped up to a multiple of ``step``.  Estimators that take
    ``refinement_levels = L`` report the grids ``step, step/4, ...,
    step/4**(L-1)``; the finer levels keep every node of the coarser ones.
    """

    t_end: float
    step: float
    refinement_levels: int = 1

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.refinement_levels < 1:
            raise ValueError("refinement_levels must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_end / self.step - _SNAP))

    @property
    def snapped_end(self) -> float:
        return self.n_steps * self.step

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.step

    def level_steps(self) -> list[float]:
        return [self.step / 4**lvl for lvl in range(self.refinement_levels)]


@dataclass(frozen=True, eq=False)
class OuPath:
    grid: GridSpec
    values: np.ndarray
    seed: int
    path_index: int = 0
    stationary_start: bool = True


def _coefficients(step):
    return np.exp(-0.5 * step), np.sqrt(-np.expm1(-step))


def simulate_ou_batch(grid: GridSpec, seed: int, start: int, stop: int) -> np.ndarray:
    """Paths ``start..stop-1`` as rows of a ``(stop - start, n_steps + 1)`` array."""
    n = grid.n_steps
    draws = np.empty((stop - start, n + 1))
    for row, idx in enumerate(range(start, stop)):
        draws[row] = path_rng(seed, idx).standard_normal(n + 1)
    a, b = _coefficients(grid.step)
    out = np.empty_like(draws)
    out[:, 0] = draws[:, 0]
    out[:, 1:] = lfilter([b], [1.0, -a], draws[:, 1:], axis=1, zi=(a * draws[:, :1]))[0]
    return out


def simulate_ou(grid: GridSpec, seed: int, path_index: int = 0) -> OuPath:
    values = simulate_ou_batch(grid, seed, path_index, path_index + 1)[0]
    return OuPath(grid, values, int(seed), int(path_index))


def iter_ou_batches(grid: GridSpec, seed: int, paths: int, chunk: int | None = None):
    """Yield ``(start, stop, values)`` blocks covering paths ``0..paths-1``."""
    if chunk is None:
        chunk = max(1, _CHUNK_CELLS // (grid.n_steps + 1))
    for start, stop in chunks(paths, chunk):
        yield start, stop, simulate_ou_batch(grid, seed, start, stop)


def simulate_ou_at_times(times, seed: int, start: int, stop: int) -> np.ndarray:
    """Exact samples of ``U`` at increasing (possibly irregular) ``times``."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("times must be a nonempty 1-d array")
    gaps = np.diff(times)
    if np.any(gaps < 0):
        raise ValueError("times must be non-decreasing")
    draws = np.empty((stop - start, len(times)))
    for row, idx in enumerate(range(start, stop)):
        draws[row] = path_rng(seed, idx).standard_normal(len(times))
    a, b = _coefficients(gaps)
    out = np.empty_like(draws)
    out[:, 0] = draws[:, 0]
    for i in range(len(gaps)):
        out[:, i + 1] = a[i] * out[:, i] + b[i] * draws[:, i + 1]
    return out


def _snap_window(grid: GridSpec, lo: float, hi: float) -> tuple[int, int]:
    if lo > hi:
        raise ValueError(f"window [{lo}, {hi}] is reversed")
    end = grid.snapped_end
    if lo < -_SNAP * grid.step or hi > end + _SNAP * grid.step:
        raise WindowRangeError(f"window [{lo}, {hi}] outside the grid [0, {end}]")
    i_lo = max(0, int(math.floor(lo / grid.step + _SNAP)))
    i_hi = min(grid.n_steps, int(math.ceil(hi / grid.step - _SNAP)))
    return i_lo, i_hi


def window_suprema_batch(values: np.ndarray, grid: GridSpec, windows) -> np.ndarray:
    """``max |U|`` over each window for every row; windows snap outward to nodes."""
    values = np.atleast_2d(values)
    out = np.empty((values.shape[0], len(windows)))
    for j, (lo, hi) in enumerate(windows):
        i_lo, i_hi = _snap_window(grid, lo, hi)
        out[:, j] = np.abs(values[:, i_lo : i_hi + 1]).max(axis=1)
    return out


def window_suprema(path: OuPath, windows) -> list[float]:
    return window_suprema_batch(path.values, path.grid, windows)[0].tolist()


@dataclass(frozen=True)
class LevelEstimate:
    step: float
    probability: float
    half_width_ci: float


@dataclass(frozen=True)
class SmallDevEstimate:
    barrier: Barrier
    t: float
    probability: float
    paths: int
    half_width_ci: float
    per_level: tuple[LevelEstimate, ...]

    @property
    def interval(self) -> tuple[float, float]:
        return (
            max(0.0, self.probability - self.half_width_ci),
            min(1.0, self.probability + self.half_width_ci),
        )


def ou_bridge(left, right, step: float, m: int, normals: np.ndarray) -> np.ndarray:
    """Interior values of ``U`` at ``step * i / m``, ``i = 1..m-1``, given both endpoints.

    ``normals`` has shape ``(rows, m)``.  A free path is run forward from
    ``left`` and corrected toward ``right`` by the Gaussian regression gain,
    which reproduces the exact conditional law.
    """
    d = step / m
    a, b = _coefficients(d)
    s = np.arange(1, m) * d
    gain = (np.exp(-0.5 * (step - s)) - np.exp(-0.5 * (step + s))) / -np.expm1(-step)
    left = np.asarray(left, dtype=float)
    free = lfilter([b], [1.0, -a], normals, axis=1, zi=(a * left)[:, None])[0]
    return free[:, :-1] - gain[None, :] * (free[:, -1] - np.asarray(right, dtype=float))[:, None]


def _bridge_interval_maxima(block, rows, cols, start, grid, seed):
    """Refine flagged intervals and return per-level maxima of ``|U|`` inside them.

    Interval ``cols[q]`` of path ``start + rows[q]`` is split into ``4**(L-1)``
    sub-steps: a free path is run forward from the left node and corrected
    toward the right node (Gaussian conditioning), which is exact in law.
    Draws are addressed by ``(path, interval, sub-step)``.
    """
    levels = grid.refinement_levels
    m = 4 ** (levels - 1)
    out = np.zeros((levels - 1, len(rows)))
    for lo, hi in chunks(len(rows), _BRIDGE_BATCH):
        r, c = rows[lo:hi], cols[lo:hi]
        counters = c.astype(np.uint64)[:, None] * np.uint64(m) + np.arange(m, dtype=np.uint64)[None, :]
        g = counter_normals(seed, (start + r).astype(np.uint64)[:, None], counters)
        inner = np.abs(ou_bridge(block[r, c], block[r, c + 1], grid.step, m, g))
        for lvl in range(1, levels):
            stride = 4 ** (levels - 1 - lvl)
            out[lvl - 1, lo:hi] = inner[:, stride - 1 :: stride].max(axis=1)
    return out


def small_deviation_table(zs, ts, paths: int, grid: GridSpec, seed: int):
    """Estimate ``P{max |U| < z over grid nodes in [0, t]}`` for every ``(z, t)``.

    All pairs share the same simulated paths.  One estimate per refinement
    level; the finest is the headline.  Returns a dict keyed by ``(z, t)``.
    """
    zs = [float(z) for z in zs]
    ts = [float(t) for t in ts]
    if paths < 1:
        raise ValueError("paths must be positive")
    for t in ts:
        if not 0 < t <= grid.snapped_end + _SNAP * grid.step:
            raise WindowRangeError(f"t={t} outside (0, {grid.snapped_end}]")
    levels = grid.refinement_levels
    nodes = [int(math.floor(t / grid.step + _SNAP)) for t in ts]
    margin = _MARGIN_SIGMAS * math.sqrt(grid.step)
    refine_seed = module_seed(seed, "oupath.refine")
    z_arr = np.array(zs)
    counts = np.zeros((levels, len(zs), len(ts)), dtype=np.int64)
    for start, _, block in iter_ou_batches(grid, seed, paths):
        absu = np.abs(block)
        running = [np.maximum.accumulate(absu, axis=1)]
        if levels > 1:
            ends = np.maximum(absu[:, :-1], absu[:, 1:])
            flag = np.zeros(ends.shape, dtype=bool)
            for z in zs:
                flag |= (running[0][:, 1:] < z) & (ends >= z - margin)
            rows, cols = np.nonzero(flag)
            inner = _bridge_interval_maxima(block, rows, cols, start, grid, refine_seed)
            for lvl in range(1, levels):
                extra = np.zeros(ends.shape)
                extra[rows, cols] = inner[lvl - 1]
                merged = absu.copy()
                np.maximum(merged[:, 1:], extra, out=merged[:, 1:])
                running.append(np.maximum.accumulate(merged, axis=1))
        for lvl, run in enumerate(running):
            for it, node in enumerate(nodes):
                counts[lvl, :, it] += (run[:, node][None, :] < z_arr[:, None]).sum(axis=1)
    steps = grid.level_steps()
    out = {}
    for iz, z in enumerate(zs):
        for it, t in enumerate(ts):
            per_level = tuple(
                LevelEstimate(
                    steps[lvl],
                    float(counts[lvl, iz, it] / paths),
                    wilson_half_width(int(counts[lvl, iz, it]), paths),
                )
                for lvl in range(levels)
            )
            fine = per_level[-1]
            out[(z, t)] = SmallDevEstimate(
                Barrier(z), t, fine.probability, paths, fine.half_width_ci, per_level
            )
    return out


def estimate_small_deviation(barrier, t: float, paths: int, grid: GridSpec, seed: int):
    barrier = _as_barrier(barrier)
    return small_deviation_table([barrier.z], [t], paths, grid, seed)[(barrier.z, float(t))]


@dataclass(frozen=True)
class MixingPoint:
    lag: float
    correlation: float
    ci_low: float
    ci_high: float


def _top_canonical_correlation(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    qx, _ = np.linalg.qr(x)
    qy, _ = np.linalg.qr(y)
    s = np.linalg.svd(qx.T @ qy, compute_uv=False)
    return float(min(1.0, s[0]))


def empirical_mixing(
    paths: int,
    lag_set,
    seed: int = 0,
    step: float = 1.0 / 16,
    span: float = 2.0,
    pair_only: bool = False,
) -> list[MixingPoint]:
    """Correlation between the past before ``t0`` and the future after ``t0 + lag``.

    The past is represented by ``U`` at ``t0, t0 - 1/2, t0 - 1`` and its mean
    over ``[t0 - 1, t0]``; the future by the mirror-image functionals from
    ``t0 + lag``.  The reported value is the top canonical correlation of the
    two dictionaries, a lower bound on the maximal correlation coefficient
    over the full past and future sigma-fields, not an estimate of it.  With
    ``pair_only`` the dictionaries shrink to ``U(t0)`` and ``U(t0 + lag)``.
    """
    lags = [float(v) for v in lag_set]
    if any(v < 0 for v in lags):
        raise ValueError("lags must be nonnegative")
    t0 = span
    grid = GridSpec(t0 + max(lags) + span, step)
    values = np.concatenate([b for _, _, b in iter_ou_batches(grid, seed, paths)])

    def node(t):
        return int(round(t / step))

    def dictionary(anchor, sign):
        cols = [values[:, node(anchor)]]
        if not pair_only:
            cols.append(values[:, node(anchor + sign * 0.5)])
            cols.append(values[:, node(anchor + sign * 1.0)])
            a, b = sorted((node(anchor), node(anchor + sign * 1.0)))
            cols.append(values[:, a : b + 1].mean(axis=1))
        return np.column_stack(cols)

    past = dictionary(t0, -1.0)
    out = []
    for lag in lags:
        fut = dictionary(t0 + lag, 1.0)
        r = _top_canonical_correlation(past, fut)
        lo, hi = fisher_interval(r, paths)
        out.append(MixingPoint(lag, r, lo, hi))
    return out

"""Kubilius random model and windowed inf-sup statistics.

The model draws independent ``Y_p ~ Bernoulli(1/p)`` over primes ``p <= r``;
``T_j = sum_{p<=j} Y_p`` mimics ``omega(m, j)`` for a random integer ``m``.
All quantities are step functions of ``j`` that change only at primes, so a
path is stored as one state per prime count: state ``i`` holds the values
for ``p_i <= j < p_{i+1}`` and state 0 those for ``j < 2``.

Windows (shared verbatim with the integer side in :mod:`slowinc.sieve`) are
anchored at ``N = e^k`` for the integers ``k`` with ``M1 <= e^k <= M2``:

* ``scale="index"``: real ``j`` in ``[N, N f(N)]``;
* ``scale="mertens"``: ``I_N = {j : N <= s_j^2 <= N f(N)}``.

At desk scale ``s_j^2 <= 3`` for every reachable ``j``, so Mertens-scale
windows with ``N = e^k`` are mostly empty; the index scale is the default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import gamma

from slowinc._stats import wilson_half_width
from slowinc.counting import TestFunction
from slowinc.eigen import Barrier, _as_barrier
from slowinc.oupath import WindowRangeError, simulate_ou_at_times
from slowinc.primes import prime_count, primes_up_to
from slowinc.streams import chunks, path_rng

SCALES = ("index", "mertens")
CENTERINGS = ("mertens", "mean", "loglog")
_LOG_TOL = 1e-9
_MODEL_BATCH = 4096
_CELL_BUDGET = 4_000_000


@dataclass(frozen=True, eq=False)
class PrimeBasis:
    r: int
    primes: np.ndarray
    mertens: np.ndarray  # s_j^2 for j = 0..r
    mean: np.ndarray  # E T_j = sum_{p<=j} 1/p for j = 0..r

    @property
    def n_primes(self) -> int:
        return len(self.primes)

    @property
    def state_variance(self) -> np.ndarray:
        """``s^2`` in state ``i`` (after the first ``i`` primes), ``i = 0..n_primes``."""
        return np.concatenate([[0.0], self.mertens[self.primes]])

    @property
    def state_mean(self) -> np.ndarray:
        return np.concatenate([[0.0], self.mean[self.primes]])

    def pi(self, t) -> np.ndarray:
        if np.any(np.asarray(t) > self.r):
            raise WindowRangeError(f"t beyond the prime cutoff r={self.r}")
        return prime_count(self.primes, t)

    def mertens_gap(self, j_min: int = 10) -> float:
        """``max_{j_min <= j <= r} |s_j^2 - log log j|``."""
        if self.r < j_min:
            raise ValueError("r below j_min")
        j = np.arange(j_min, self.r + 1, dtype=float)
        return float(np.max(np.abs(self.mertens[j_min:] - np.log(np.log(j)))))


def build_basis(r: int) -> PrimeBasis:
    r = int(r)
    if r < 2:
        raise ValueError("r must be >= 2")
    primes = primes_up_to(r)
    inv = 1.0 / primes.astype(float)
    var_inc = np.zeros(r + 1)
    mean_inc = np.zeros(r + 1)
    var_inc[primes] = inv * (1.0 - inv)
    mean_inc[primes] = inv
    return PrimeBasis(r, primes, np.cumsum(var_inc), np.cumsum(mean_inc))


@dataclass(frozen=True, eq=False)
class ModelPath:
    basis: PrimeBasis
    y: np.ndarray  # bool per prime
    seed: int
    path_index: int = 0

    @property
    def t(self) -> np.ndarray:
        """``T_j`` for ``j = 0..r``."""
        states = np.concatenate([[0], np.cumsum(self.y, dtype=np.int64)])
        return states[self.basis.pi(np.arange(self.basis.r + 1))]

    @property
    def s(self) -> np.ndarray:
        return self.t - self.basis.mean


def sample_model_batch(
    basis: PrimeBasis, seed: int, start: int, stop: int, n_primes: int | None = None
) -> np.ndarray:
    """``Y`` for paths ``start..stop-1`` as a bool ``(paths, n_primes)`` matrix.

    Path ``i`` draws its uniforms from its own stream, so truncating to the
    first ``n_primes`` primes yields a prefix of the full path.
    """
    n = basis.n_primes if n_primes is None else int(n_primes)
    prob = 1.0 / basis.primes[:n].astype(float)
    out = np.empty((stop - start, n), dtype=bool)
    for row, idx in enumerate(range(start, stop)):
        out[row] = path_rng(seed, idx).random(n) < prob
    return out


def sample_model(basis: PrimeBasis, seed: int, path_index: int = 0) -> ModelPath:
    y = sample_model_batch(basis, seed, path_index, path_index + 1)[0]
    return ModelPath(basis, y, int(seed), int(path_index))


def state_counts(y: np.ndarray, n_states: int) -> np.ndarray:
    """``T`` in states ``0..n_states`` from a ``(rows, >= n_states)`` bool matrix."""
    y = np.asarray(y, dtype=bool)
    out = np.zeros((y.shape[0], n_states + 1), dtype=np.int16)
    np.cumsum(y[:, :n_states], axis=1, dtype=np.int16, out=out[:, 1:])
    return out


@dataclass(frozen=True)
class WindowQuery:
    """Parameters of ``inf_{N} sup_{j in window(N)} |T_j - center_j| / scale_j``.

    ``centering`` selects the deviation: ``"mertens"`` uses ``(T - s_j^2)/s_j``,
    ``"mean"`` uses ``(T - E T_j)/s_j`` and ``"loglog"`` uses
    ``(T - log log j)/sqrt(log log j)``.
    """

    m1: float
    m2: float
    f: TestFunction
    barrier: Barrier
    scale: str = "index"
    centering: str = "mertens"

    def __post_init__(self):
        object.__setattr__(self, "barrier", _as_barrier(self.barrier))
        if not 1.0 <= self.m1 <= self.m2:
            raise ValueError("need 1 <= M1 <= M2")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}")
        if self.centering not in CENTERINGS:
            raise ValueError(f"centering must be one of {CENTERINGS}")

    def anchors(self) -> np.ndarray:
        lo = math.ceil(math.log(self.m1) - _LOG_TOL)
        hi = math.floor(math.log(self.m2) + _LOG_TOL)
        if lo > hi:
            raise ValueError(f"no e^k in [{self.m1}, {self.m2}]")
        return np.arange(lo, hi + 1)


@dataclass(frozen=True, eq=False)
class WindowPlan:
    """Evaluation points of every window, laid out contiguously per window."""

    query: WindowQuery
    ks: np.ndarray
    lo_j: np.ndarray
    hi_j: np.ndarray
    lo_state: np.ndarray
    hi_state: np.ndarray
    point_state: np.ndarray
    point_center: np.ndarray
    point_scale: np.ndarray
    starts: np.ndarray = field(repr=False)

    @property
    def max_state(self) -> int:
        return int(self.hi_state.max())

    def window_sups(self, counts: np.ndarray) -> np.ndarray:
        """``(rows, windows)`` suprema of the deviation from state counts ``T``."""
        dev = np.abs(counts[:, self.point_state] - self.point_center) / self.point_scale
        return np.maximum.reduceat(dev, self.starts, axis=1)

    def window_sups_of(self, values: np.ndarray) -> np.ndarray:
        """Window suprema of precomputed per-point values."""
        return np.maximum.reduceat(values, self.starts, axis=1)

    def inf_sup(self, counts: np.ndarray) -> np.ndarray:
        return self.window_sups(counts).min(axis=1)


def plan_windows(basis: PrimeBasis, query: WindowQuery) -> WindowPlan:
    ks = query.anchors()
    n_vals = np.exp(ks.astype(float))
    width = query.f.log_f_at_exp(ks.astype(float))
    tops = n_vals * np.exp(width)
    var = basis.state_variance
    if query.scale == "index":
        if n_vals[0] < 2.0:
            raise ValueError("index-scale windows need N >= 2")
        if tops[-1] > basis.r * (1 + 1e-12):
            raise WindowRangeError(
                f"window top N f(N) = {tops[-1]:.6g} exceeds r = {basis.r}"
            )
        lo_state = basis.pi(n_vals)
        hi_state = basis.pi(np.minimum(tops, basis.r))
        lo_j, hi_j = n_vals, tops
    else:
        if tops[-1] > basis.mertens[-1]:
            raise WindowRangeError(
                f"window top N f(N) = {tops[-1]:.6g} exceeds s_r^2 = {basis.mertens[-1]:.6g}"
            )
        lo_state = np.searchsorted(var, n_vals, side="left")
        hi_state = np.searchsorted(var, tops, side="right") - 1
        empty = lo_state > hi_state
        if np.any(empty):
            raise ValueError(f"empty Mertens-scale window(s) at k = {ks[empty].tolist()}")
        lo_j = basis.primes[lo_state - 1].astype(float)
        nxt = np.append(basis.primes, basis.r + 1)
        hi_j = np.minimum(nxt[hi_state], basis.r + 1) - 1.0
        hi_j = np.maximum(hi_j, lo_j)

    states, centers, scales, starts = [], [], [], []
    mean = basis.state_mean
    # state i covers p_i <= j < p_{i+1}
    state_lo = np.concatenate([[-np.inf], basis.primes.astype(float)])
    state_hi = np.append(basis.primes.astype(float), np.inf)
    pos = 0
    for w in range(len(ks)):
        idx = np.arange(lo_state[w], hi_state[w] + 1)
        starts.append(pos)
        if query.centering == "loglog":
            # (T - L)/sqrt(L) is monotone in L within a state: endpoints suffice
            left = np.maximum(state_lo[idx], lo_j[w])
            right = np.minimum(state_hi[idx], hi_j[w])
            j_pts = np.concatenate([left, right])
            st = np.concatenate([idx, idx])
            ll = np.log(np.log(j_pts))
            if np.any(ll <= 0):
                raise ValueError("log log j <= 0 inside a window; need j > e")
            states.append(st)
            centers.append(ll)
            scales.append(np.sqrt(ll))
        else:
            if idx[0] < 1:
                raise ValueError("window touches state 0 where s_j = 0")
            center = var[idx] if query.centering == "mertens" else mean[idx]
            states.append(idx)
            centers.append(center)
            scales.append(np.sqrt(var[idx]))
        pos += len(states[-1])
    return WindowPlan(
        query,
        ks,
        np.asarray(lo_j, dtype=float),
        np.asarray(hi_j, dtype=float),
        np.asarray(lo_state),
        np.asarray(hi_state),
        np.concatenate(states),
        np.concatenate(centers),
        np.concatenate(scales),
        np.asarray(starts),
    )


def _row_chunk(plan: WindowPlan) -> int:
    return max(1, _CELL_BUDGET // max(1, len(plan.point_state)))


@dataclass(frozen=True)
class WindowFraction:
    fraction: float
    half_width_ci: float
    samples: int
    statistics: np.ndarray = field(repr=False)

    @property
    def interval(self) -> tuple[float, float]:
        return (
            max(0.0, self.fraction - self.half_width_ci),
            min(1.0, self.fraction + self.half_width_ci),
        )


def _fraction(stats: np.ndarray, z: float) -> WindowFraction:
    hits = int(np.count_nonzero(stats <= z))
    n = len(stats)
    return WindowFraction(hits / n, wilson_half_width(hits, n), n, stats)


def model_window_sups(basis: PrimeBasis, query: WindowQuery, paths: int, seed: int) -> np.ndarray:
    """``(paths, windows)`` suprema of the deviation under the model."""
    plan = plan_windows(basis, query)
    n_states = plan.max_state
    out = np.empty((paths, len(plan.ks)))
    batch = min(_MODEL_BATCH, _row_chunk(plan))
    for start, stop in chunks(paths, batch):
        y = sample_model_batch(basis, seed, start, stop, n_states)
        out[start:stop] = plan.window_sups(state_counts(y, n_states))
    return out


def model_window_statistics(basis: PrimeBasis, query: WindowQuery, paths: int, seed: int) -> np.ndarray:
    """Per-path ``inf_N sup_{j in window(N)}`` deviation under the model."""
    return model_window_sups(basis, query, paths, seed).min(axis=1)


def model_window_inf_sup(basis: PrimeBasis, query: WindowQuery, paths: int, seed: int) -> WindowFraction:
    """Fraction of model paths with ``inf sup <= z`` and its Wilson 95% half-width."""
    if paths < 1:
        raise ValueError("paths must be positive")
    stats = model_window_statistics(basis, query, paths, seed)
    return _fraction(stats, query.barrier.z)


def brownian_window_statistics(basis: PrimeBasis, query: WindowQuery, paths: int, seed: int) -> np.ndarray:
    """Gaussian counterpart of the window statistic.

    ``S_j / s_j`` is replaced by ``W(s_j^2) / s_j = U(log s_j^2)``, sampled
    exactly at the same states as the model, so the only difference from
    :func:`model_window_statistics` is Gaussian versus Bernoulli increments.
    Requires a variance-clock centering (``"mertens"`` or ``"mean"``).
    """
    if query.centering == "loglog":
        raise ValueError("the Brownian comparator uses the s_j^2 clock")
    plan = plan_windows(basis, query)
    used = np.unique(plan.point_state)
    times = np.log(basis.state_variance[used])
    col = np.searchsorted(used, plan.point_state)
    out = np.empty(paths)
    batch = max(1, _CELL_BUDGET // max(len(used), len(col)))
    for start, stop in chunks(paths, batch):
        u = np.abs(simulate_ou_at_times(times, seed, start, stop))
        out[start:stop] = plan.window_sups_of(u[:, col]).min(axis=1)
    return out


def brownian_window_inf_sup(basis: PrimeBasis, query: WindowQuery, paths: int, seed: int) -> WindowFraction:
    stats = brownian_window_statistics(basis, query, paths, seed)
    return _fraction(stats, query.barrier.z)


# -- independent sums ---------------------------------------------------------

_FAMILIES = ("gaussian", "rademacher", "uniform")


@dataclass(frozen=True)
class IndepSumSpec:
    """Unit-variance i.i.d. summands, so ``z_j^2 = j``.

    ``v_bound`` is ``E|X|^alpha / E X^2`` in closed form;
    :meth:`numeric_v_bound` recomputes it by quadrature.
    """

    family: str
    alpha: float = 3.0

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"family must be one of {_FAMILIES}")
        if not self.alpha > 2:
            raise ValueError("alpha must exceed 2")

    @property
    def v_bound(self) -> float:
        a = self.alpha
        if self.family == "gaussian":
            return 2 ** (a / 2) * gamma((a + 1) / 2) / math.sqrt(math.pi)
        if self.family == "rademacher":
            return 1.0
        return 3 ** (a / 2) / (a + 1)

    def numeric_v_bound(self) -> float:
        a = self.alpha
        if self.family == "gaussian":
            dens = lambda x: math.exp(-x * x / 2) / math.sqrt(2 * math.pi)  # noqa: E731
            num = 2 * integrate.quad(lambda x: x**a * dens(x), 0, np.inf)[0]
            den = 2 * integrate.quad(lambda x: x * x * dens(x), 0, np.inf)[0]
        elif self.family == "uniform":
            h = math.sqrt(3.0)
            num = integrate.quad(lambda x: x**a, 0, h)[0] / h
            den = integrate.quad(lambda x: x * x, 0, h)[0] / h
        else:
            num, den = 1.0, 1.0
        return num / den

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "gaussian":
            return rng.standard_normal(n)
        if self.family == "rademacher":
            return 2.0 * rng.integers(0, 2, size=n) - 1.0
        h = math.sqrt(3.0)
        return rng.uniform(-h, h, size=n)


def index_windows(f: TestFunction, k_max: int) -> np.ndarray:
    """Integer ``j`` ranges ``[ceil(e^k), floor(e^k f(e^k))]`` for ``k = 1..k_max``; ``lo > hi`` marks an empty window."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    k = np.arange(1, k_max + 1, dtype=float)
    lo = np.ceil(np.exp(k) * (1 - 1e-12))
    hi = np.floor(np.exp(k + f.log_f_at_exp(k)) * (1 + 1e-12))
    return np.column_stack([lo, hi]).astype(np.int64)


@dataclass(frozen=True, eq=False)
class IndepSumsResult:
    windows: np.ndarray  # (k_max, 2) j ranges
    sups: np.ndarray  # (paths, k_max), NaN for empty windows

    @property
    def running_min(self) -> np.ndarray:
        """Minimum over ``k' <= k`` of the window suprema: finite-horizon stand-in for the liminf."""
        return np.fmin.accumulate(self.sups, axis=1)


def _sups_from_normalized(values: np.ndarray, windows: np.ndarray, offset: int) -> np.ndarray:
    out = np.full((values.shape[0], len(windows)), np.nan)
    for w, (lo, hi) in enumerate(windows):
        if lo <= hi:
            out[:, w] = values[:, lo - offset : hi - offset + 1].max(axis=1)
    return out


def indep_sums_functional(spec: IndepSumSpec, f: TestFunction, k_max: int, paths: int, seed: int) -> IndepSumsResult:
    """Window suprema of ``|Z_j| / z_j`` for ``Z_j = X_1 + ... + X_j``."""
    windows = index_windows(f, k_max)
    j_max = int(windows[:, 1].max())
    scale = np.sqrt(np.arange(1, j_max + 1, dtype=float))
    sups = np.empty((paths, k_max))
    batch = max(1, _CELL_BUDGET // j_max)
    for start, stop in chunks(paths, batch):
        z = np.empty((stop - start, j_max))
        for row, idx in enumerate(range(start, stop)):
            z[row] = np.cumsum(spec.draw(path_rng(seed, idx), j_max))
        sups[start:stop] = _sups_from_normalized(np.abs(z) / scale, windows, 1)
    return IndepSumsResult(windows, sups)


def ou_indep_comparator(f: TestFunction, k_max: int, paths: int, seed: int) -> IndepSumsResult:
    """The same window suprema for ``U(log j)``, the Gaussian-sum law in OU time."""
    windows = index_windows(f, k_max)
    live = windows[windows[:, 0] <= windows[:, 1]]
    j_lo = int(live[:, 0].min())
    j_max = int(windows[:, 1].max())
    times = np.log(np.arange(j_lo, j_max + 1, dtype=float))
    sups = np.empty((paths, k_max))
    batch = max(1, _CELL_BUDGET // len(times))
    for start, stop in chunks(paths, batch):
        u = np.abs(simulate_ou_at_times(times, seed, start, stop))
        sups[start:stop] = _sups_from_normalized(u, windows, j_lo)
    return IndepSumsResult(windows, sups)

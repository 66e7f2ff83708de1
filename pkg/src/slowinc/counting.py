"""Window events, their counting function and the series class test.

For a growth function ``f`` and barrier ``z`` the ``k``-th window event is

    A_k = { sup_{k <= s <= k + log f(e^k)} |U(s)| <= z },

the same event as ``|W(t)| <= z sqrt(t)`` on ``[e^k, e^k f(e^k)]``.  Its
probability decays like ``f(e^k)^(-theta)`` with ``theta = decay_exponent(z)``.
Because ``U`` runs at half the clock of the eigenproblem, ``theta`` is
``lambda(z) / 2``, not ``lambda(z)``; every series below is built with
``theta``, and callers may pass an explicit exponent to override it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from slowinc.eigen import OU_CLOCK, Barrier, _as_barrier, lambda_of
from slowinc.oupath import GridSpec, WindowRangeError, iter_ou_batches, window_suprema_batch

ADMISSIBILITY_RHOS = (0.5, 0.1, 0.01)
DEFAULT_BC_EXPONENT = 1.6


def decay_exponent(barrier) -> float:
    """``theta(z)`` with ``P(A_k) ~ f(e^k)^(-theta)`` for the window events of ``U``."""
    return OU_CLOCK * lambda_of(barrier)


@dataclass(frozen=True)
class TestFunction:
    """Non-decreasing window-growth function ``f``.

    ``power_log(c)`` is ``f(t) = log(t)**c``.  ``tabulated`` interpolates
    ``log f`` linearly in ``log t`` between samples and is held constant
    outside them.
    """

    __test__ = False  # not a pytest class

    kind: str
    c: float | None = None
    t_values: tuple = ()
    f_values: tuple = ()
    description: str = ""

    def __post_init__(self):
        if self.kind == "power_log":
            if self.c is None or not self.c > 0:
                raise ValueError("power_log needs c > 0")
        elif self.kind == "tabulated":
            t = np.asarray(self.t_values, dtype=float)
            f = np.asarray(self.f_values, dtype=float)
            if t.ndim != 1 or t.shape != f.shape or len(t) < 2:
                raise ValueError("tabulated f needs matching 1-d samples, at least two")
            if np.any(np.diff(t) <= 0) or np.any(t <= 0) or np.any(f <= 0):
                raise ValueError("tabulated samples must be positive with increasing t")
            if np.any(np.diff(f) < 0):
                raise ValueError("tabulated f must be non-decreasing")
            if not f[-1] > f[0]:
                raise ValueError("tabulated f must grow over its range")
        else:
            raise ValueError(f"unknown TestFunction kind {self.kind!r}")

    @classmethod
    def power_log(cls, c: float) -> TestFunction:
        return cls("power_log", c=float(c), description=f"log(t)^{c:g}")

    @classmethod
    def tabulated(cls, t_values, f_values, description: str = "tabulated") -> TestFunction:
        return cls(
            "tabulated",
            t_values=tuple(float(v) for v in t_values),
            f_values=tuple(float(v) for v in f_values),
            description=description,
        )

    def log_f(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "power_log":
            return self.c * np.log(np.log(t))
        lt = np.log(np.asarray(self.t_values))
        lf = np.log(np.asarray(self.f_values))
        return np.interp(np.log(t), lt, lf)

    def __call__(self, t):
        return np.exp(self.log_f(t))

    def log_f_at_exp(self, k) -> np.ndarray:
        """``log f(e^k)``, the window length in ``U`` time; exact for ``power_log``."""
        k = np.asarray(k, dtype=float)
        if self.kind == "power_log":
            return self.c * np.log(k)
        return self.log_f(np.exp(k))

    def admissibility(self, rhos=ADMISSIBILITY_RHOS) -> dict[float, float | None]:
        """Threshold beyond which ``f(t) <= t**rho`` for each ``rho``.

        ``power_log`` is ``o(t**rho)`` for every ``rho``; its thresholds are
        computed on a log grid up to ``t = e**1000``.  For tabulated ``f`` the
        check runs over the sample range; ``None`` means the inequality fails
        at the last sample.
        """
        if self.kind == "power_log":
            logt = np.exp(np.linspace(0.0, math.log(1000.0), 4000))
            logf = self.c * np.log(logt)
        else:
            logt = np.log(np.asarray(self.t_values))
            logf = np.log(np.asarray(self.f_values))
        out = {}
        for rho in rhos:
            ok = logf <= rho * logt
            if not ok[-1]:
                out[rho] = None
                continue
            bad = np.nonzero(~ok)[0]
            out[rho] = float(math.exp(logt[bad[-1] + 1])) if len(bad) else float(math.exp(logt[0]))
        return out


def window_bounds(f: TestFunction, n: int) -> np.ndarray:
    """``(n, 2)`` array of OU-time windows ``[k, k + log f(e^k)]``, ``k = 1..n``."""
    k = np.arange(1, n + 1, dtype=float)
    width = f.log_f_at_exp(k)
    if np.any(width < 0):
        raise ValueError("f(e^k) < 1 for some k: window would be reversed")
    return np.column_stack([k, k + width])


@dataclass(frozen=True)
class SigmaSeries:
    partial_sum: float
    diverges_hint: bool | None
    exponent: float
    terms: np.ndarray = field(repr=False)


def sigma_series(f: TestFunction, barrier, n: int, exponent: float | None = None) -> SigmaSeries:
    """Partial sum ``sum_{k<=n} f(e^k)^(-theta)``.

    ``diverges_hint`` is the analytic verdict for ``power_log`` (``c theta <= 1``)
    and ``None`` for tabulated ``f``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    theta = decay_exponent(barrier) if exponent is None else float(exponent)
    k = np.arange(1, n + 1, dtype=float)
    terms = np.exp(-theta * f.log_f_at_exp(k))
    hint = f.c * theta <= 1.0 if f.kind == "power_log" else None
    return SigmaSeries(float(terms.sum()), hint, theta, terms)


class FunctionClass(str, Enum):
    U = "U_z"  # events occur finitely often
    V = "V_z"  # events occur infinitely often
    UNDECIDED = "undecided"


@dataclass(frozen=True)
class Classification:
    verdict: FunctionClass
    certified: bool
    diagnostics: dict


def classify(
    f: TestFunction,
    barrier,
    exponent: float | None = None,
    heuristic: bool = False,
    slope_margin: float = 0.2,
) -> Classification:
    """Class of ``f`` for barrier ``z`` by the series criterion.

    ``power_log`` is decided exactly: ``U`` iff ``c theta > 1``.  A tabulated
    ``f`` stays undecided, since finitely many terms cannot certify a tail.
    With ``heuristic=True`` the log-log slope of the terms over the second
    half of the tabulated range is compared against ``-1 +- slope_margin``;
    such verdicts come back with ``certified=False``.
    """
    theta = decay_exponent(barrier) if exponent is None else float(exponent)
    if f.kind == "power_log":
        product = f.c * theta
        verdict = FunctionClass.U if product > 1.0 else FunctionClass.V
        return Classification(verdict, True, {"c_theta": product, "theta": theta})

    k_max = math.log(f.t_values[-1])
    k = np.arange(1, max(2, int(k_max)) + 1, dtype=float)
    terms = np.exp(-theta * f.log_f_at_exp(k))
    diag = {"theta": theta, "k_range": (1, int(k[-1])), "partial_sum": float(terms.sum())}
    tail = k >= k[-1] / 2
    if tail.sum() >= 3:
        slope = float(np.polyfit(np.log(k[tail]), np.log(terms[tail]), 1)[0])
        diag["tail_slope"] = slope
    else:
        slope = None
    verdict = FunctionClass.UNDECIDED
    if heuristic and slope is not None:
        if slope < -1.0 - slope_margin:
            verdict = FunctionClass.U
        elif slope > -1.0 + slope_margin:
            verdict = FunctionClass.V
    return Classification(verdict, False, diag)


@dataclass(frozen=True, eq=False)
class CountingReport:
    n: int
    realized: np.ndarray  # (paths,) N_n
    counts: np.ndarray  # (paths, n) N_k for k = 1..n
    events: np.ndarray  # (paths, n) indicator of A_k
    suprema: np.ndarray  # (paths, n) window suprema
    per_k_hits: np.ndarray  # (n,)
    proxy_terms: np.ndarray  # (n,) f(e^k)^(-theta)
    mean_proxy: float
    lambda_used: float
    exponent: float

    @property
    def min_sup(self) -> np.ndarray:
        """Running minimum over ``k`` of the window suprema: finite-``n`` stand-in for ``J(f)``."""
        return np.minimum.accumulate(self.suprema, axis=1)


def count_windows(
    f: TestFunction,
    barrier,
    n: int,
    paths: int,
    grid: GridSpec,
    seed: int,
    exponent: float | None = None,
) -> CountingReport:
    """Simulate ``paths`` trajectories and record ``A_k`` (``sup <= z``) for ``k = 1..n``."""
    barrier = _as_barrier(barrier)
    if n < 1 or paths < 1:
        raise ValueError("n and paths must be positive")
    windows = window_bounds(f, n)
    if windows[-1, 1] > grid.snapped_end + 1e-9 * grid.step:
        raise WindowRangeError(
            f"grid ends at {grid.snapped_end} but window {n} ends at {windows[-1, 1]}"
        )
    sups = np.concatenate(
        [window_suprema_batch(block, grid, windows) for _, _, block in iter_ou_batches(grid, seed, paths)]
    )
    events = sups <= barrier.z
    counts = np.cumsum(events, axis=1, dtype=np.int32)
    lam = lambda_of(barrier)
    theta = OU_CLOCK * lam if exponent is None else float(exponent)
    proxy = np.exp(-theta * f.log_f_at_exp(np.arange(1, n + 1, dtype=float)))
    return CountingReport(
        n=n,
        realized=counts[:, -1].copy(),
        counts=counts,
        events=events,
        suprema=sups,
        per_k_hits=events.mean(axis=0),
        proxy_terms=proxy,
        mean_proxy=float(proxy.sum()),
        lambda_used=lam,
        exponent=theta,
    )


def counting_grid(f: TestFunction, n: int, step: float) -> GridSpec:
    """Smallest grid covering every window up to ``k = n``."""
    return GridSpec(float(window_bounds(f, n)[-1, 1]), step)


@dataclass(frozen=True)
class Sandwich:
    k1: float
    k2: float
    covered: float

    @property
    def ratio(self) -> float:
        return self.k2 / self.k1 if self.k1 > 0 else math.inf


def fit_sandwich(per_k_hits, proxy_terms, coverage: float = 0.95) -> Sandwich:
    """Narrowest ``[K1, K2]`` (in log scale) holding ``hits / proxy`` for a ``coverage`` share of ``k``."""
    ratios = np.sort(np.asarray(per_k_hits, dtype=float) / np.asarray(proxy_terms, dtype=float))
    n = len(ratios)
    need = int(math.ceil(coverage * n))
    positive = ratios > 0
    if need == 0:
        raise ValueError("nothing to cover")
    if positive.sum() < need:
        return Sandwich(0.0, float(ratios[-1]), float(np.mean(ratios <= ratios[-1])))
    r = ratios[positive]
    logs = np.log(r)
    widths = logs[need - 1 :] - logs[: len(r) - need + 1]
    i = int(np.argmin(widths))
    k1, k2 = float(r[i]), float(r[i + need - 1])
    all_r = np.asarray(per_k_hits, dtype=float) / np.asarray(proxy_terms, dtype=float)
    covered = float(np.mean((all_r >= k1) & (all_r <= k2)))
    return Sandwich(k1, k2, covered)


@dataclass(frozen=True)
class BorelCantelliReport:
    n: int
    psi: float
    exponent: float
    ratios: np.ndarray  # per path at n
    percentiles: dict
    p99_by_n: dict
    flag: bool
    meaningful: bool


def _bc_ratio(hits: np.ndarray, psi: float, a: float) -> np.ndarray:
    dev = np.abs(hits - psi)
    scale = math.sqrt(psi) * math.log(psi) ** a if psi > 1 else 0.0
    if scale <= 0:
        return np.where(dev == 0, 0.0, np.inf)
    return dev / scale


def borel_cantelli_check(
    event_matrix,
    probabilities,
    a: float = DEFAULT_BC_EXPONENT,
    checkpoints=None,
    growth_tolerance: float = 0.0,
) -> BorelCantelliReport:
    """Per-path ``|sum chi_{A_k} - psi_n| / (psi_n^(1/2) log^a psi_n)``.

    ``checkpoints`` are horizons ``n' <= n`` at which the 99th percentile is
    also computed; ``flag`` is raised when it grows by more than
    ``growth_tolerance`` between consecutive checkpoints.  A raised flag is a
    violation indicator, not a proof; ``meaningful`` is ``psi_n >= 20``.
    """
    events = np.asarray(event_matrix, dtype=bool)
    probs = np.asarray(probabilities, dtype=float)
    if events.ndim != 2 or probs.ndim != 1 or events.shape[1] != len(probs):
        raise ValueError(
            f"event matrix {events.shape} does not match {probs.shape} probabilities"
        )
    n = len(probs)
    hits = np.cumsum(events, axis=1)
    psi = np.cumsum(probs)
    ratios = _bc_ratio(hits[:, -1], float(psi[-1]), a)
    pct = {q: float(np.percentile(ratios, q)) for q in (50, 90, 99)}
    horizons = sorted(set(checkpoints or [])) or [n]
    if horizons[-1] > n or horizons[0] < 1:
        raise ValueError("checkpoints must lie in 1..n")
    p99 = {
        h: float(np.percentile(_bc_ratio(hits[:, h - 1], float(psi[h - 1]), a), 99)) for h in horizons
    }
    values = [p99[h] for h in horizons]
    flag = any(b > a_ + growth_tolerance for a_, b in zip(values, values[1:]))
    return BorelCantelliReport(n, float(psi[-1]), a, ratios, pct, p99, flag, bool(psi[-1] >= 20))

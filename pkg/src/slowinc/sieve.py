"""Truncated prime-divisor table ``omega(m, t)`` and integer-side densities.

For every ``m <= x`` the table stores the ascending indices of the primes
``p <= r`` dividing ``m`` (CSR layout).  Every integer-side statistic turns a
block of rows into a divisibility matrix ``Y[m, i] = (p_i | m)``, which has
exactly the shape of a Kubilius model sample.  Integer and model events are
therefore evaluated by the same code.

On-disk format (little-endian)::

    magic  b"OMGT"
    u32    version (1)
    u64    x, r, n_primes, n_entries
    u32    crc32 of everything after the header
    u32[n_primes]      primes
    varint[x]          count of prime divisors of m = 1..x
    varint[n_entries]  prime indices, grouped by m in ascending order

Varints are unsigned LEB128.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from slowinc._stats import wilson_half_width
from slowinc.counting import TestFunction
from slowinc.eigen import OU_CLOCK, _as_barrier, lambda_of
from slowinc.kubilius import (
    PrimeBasis,
    WindowQuery,
    build_basis,
    plan_windows,
    sample_model_batch,
    state_counts,
)
from slowinc.oupath import WindowRangeError
from slowinc.streams import chunks

MAGIC = b"OMGT"
VERSION = 1
_HEADER = struct.Struct("<4sIQQQQI")
DEFAULT_MEMORY_BUDGET = 2 * 1024**3
_ROW_BLOCK = 1 << 15
_MAX_X = 10**8
POLICY_EXPONENT = 0.2


class MemoryBudgetError(MemoryError):
    """The table would not fit the configured memory budget."""


class CorruptTableError(ValueError):
    """A persisted table failed validation."""


def _index_dtype(n_primes: int):
    if n_primes <= np.iinfo(np.uint8).max + 1:
        return np.uint8
    if n_primes <= np.iinfo(np.uint16).max + 1:
        return np.uint16
    return np.uint32


def table_bytes(x: int, primes: np.ndarray) -> int:
    """Bytes needed for the CSR arrays of a table."""
    entries = int(np.sum(x // primes))
    return entries * np.dtype(_index_dtype(len(primes))).itemsize + (x + 2) * 8 + (x + 1)


@dataclass(frozen=True, eq=False)
class OmegaTable:
    x: int
    basis: PrimeBasis
    offsets: np.ndarray = field(repr=False)  # int64, length x + 2; m's entries at offsets[m]:offsets[m+1]
    indices: np.ndarray = field(repr=False)

    @property
    def r(self) -> int:
        return self.basis.r

    @property
    def n_entries(self) -> int:
        return len(self.indices)

    def prime_divisors(self, m: int) -> np.ndarray:
        self._check_m(m)
        return self.basis.primes[self.indices[self.offsets[m] : self.offsets[m + 1]]]

    def omega(self, m: int, t: float) -> int:
        """``#{p <= t : p | m}`` for ``t <= r``."""
        self._check_m(m)
        k = int(self.basis.pi(min(t, self.r))) if t >= 2 else 0
        seg = self.indices[self.offsets[m] : self.offsets[m + 1]]
        return int(np.count_nonzero(seg < k))

    def omega_all(self, t: float) -> np.ndarray:
        """``omega(m, t)`` for ``m = 0..x`` (entry 0 is 0)."""
        k = int(self.basis.pi(min(t, self.r))) if t >= 2 else 0
        cum = np.concatenate([[0], np.cumsum(self.indices < k, dtype=np.int64)])
        return cum[self.offsets[1:]] - cum[self.offsets[:-1]]

    def divisibility(self, start: int, stop: int, n_primes: int | None = None) -> np.ndarray:
        """``Y[m - start, i] = (p_i | m)`` for ``start <= m < stop``, ``i < n_primes``."""
        n = self.basis.n_primes if n_primes is None else int(n_primes)
        if not 1 <= start <= stop <= self.x + 1:
            raise ValueError("row range outside 1..x")
        lo, hi = self.offsets[start], self.offsets[stop]
        rows = np.repeat(np.arange(stop - start), np.diff(self.offsets[start : stop + 1]))
        cols = self.indices[lo:hi].astype(np.int64)
        keep = cols < n
        out = np.zeros((stop - start, n), dtype=bool)
        out[rows[keep], cols[keep]] = True
        return out

    def blocks(self, n_primes: int | None = None, size: int = _ROW_BLOCK):
        """Yield ``(start, stop, Y)`` covering ``m = 1..x``."""
        for start, stop in chunks(self.x, size):
            yield start + 1, stop + 1, self.divisibility(start + 1, stop + 1, n_primes)

    def _check_m(self, m):
        if not 1 <= m <= self.x:
            raise ValueError(f"m={m} outside 1..{self.x}")


def build_omega_table(x: int, r: int, memory_budget: int = DEFAULT_MEMORY_BUDGET) -> OmegaTable:
    """Credit each prime ``p <= r`` once to every multiple ``m <= x``."""
    x, r = int(x), int(r)
    if x < 2:
        raise ValueError("x must be >= 2")
    if not 2 <= r <= x:
        raise ValueError("need 2 <= r <= x")
    if x > _MAX_X:
        raise ValueError(f"x beyond desk scale ({_MAX_X})")
    basis = build_basis(r)
    need = table_bytes(x, basis.primes)
    if need > memory_budget:
        raise MemoryBudgetError(f"table needs {need} bytes, budget is {memory_budget}")
    counts = np.zeros(x + 1, dtype=np.uint8)
    for p in basis.primes:
        counts[p::p] += 1
    offsets = np.zeros(x + 2, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    indices = np.empty(offsets[-1], dtype=_index_dtype(basis.n_primes))
    fill = offsets[:-1].copy()
    for i, p in enumerate(basis.primes):
        ms = np.arange(p, x + 1, p)
        indices[fill[ms]] = i
        fill[ms] += 1
    return OmegaTable(x, basis, offsets, indices)


# -- persistence ------------------------------------------------------------


def _encode_varints(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.uint64)
    if len(v) == 0:
        return b""
    nbytes = np.ones(len(v), dtype=np.int64)
    for shift in range(7, 64, 7):
        nbytes += v >= (np.uint64(1) << np.uint64(shift))
    pos = np.concatenate([[0], np.cumsum(nbytes)[:-1]])
    out = np.empty(int(nbytes.sum()), dtype=np.uint8)
    rest = v.copy()
    for b in range(int(nbytes.max())):
        live = nbytes > b
        byte = (rest[live] & np.uint64(0x7F)).astype(np.uint8)
        byte |= np.where(nbytes[live] > b + 1, 0x80, 0).astype(np.uint8)
        out[pos[live] + b] = byte
        rest[live] >>= np.uint64(7)
    return out.tobytes()


def _decode_varints(buf: np.ndarray, count: int) -> tuple[np.ndarray, int]:
    """First ``count`` varints in ``buf`` and the number of bytes they use."""
    if count == 0:
        return np.zeros(0, dtype=np.int64), 0
    ends = np.flatnonzero((buf & 0x80) == 0)
    if len(ends) < count:
        raise CorruptTableError("truncated varint stream")
    used = int(ends[count - 1]) + 1
    seg = buf[:used].astype(np.int64)
    starts = np.concatenate([[0], ends[: count - 1] + 1])
    group = np.repeat(np.arange(count), np.diff(np.concatenate([starts, [used]])))
    shift = 7 * (np.arange(used) - starts[group])
    if np.any(shift > 56):
        raise CorruptTableError("varint too long")
    return np.add.reduceat((seg & 0x7F) << shift, starts), used


def save_omega_table(table: OmegaTable, path) -> None:
    counts = np.diff(table.offsets[1:])
    body = (
        table.basis.primes.astype("<u4").tobytes()
        + _encode_varints(counts)
        + _encode_varints(table.indices)
    )
    header = _HEADER.pack(
        MAGIC, VERSION, table.x, table.r, table.basis.n_primes, table.n_entries, zlib.crc32(body)
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)


def load_omega_table(path) -> OmegaTable:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptTableError("file shorter than header")
    magic, version, x, r, n_primes, n_entries, crc = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise CorruptTableError("bad magic or version")
    body = raw[_HEADER.size :]
    if zlib.crc32(body) != crc:
        raise CorruptTableError("checksum mismatch")
    basis = build_basis(r)
    primes = np.frombuffer(body, dtype="<u4", count=n_primes)
    if n_primes != basis.n_primes or not np.array_equal(primes, basis.primes):
        raise CorruptTableError("prime list does not match r")
    buf = np.frombuffer(body, dtype=np.uint8, offset=4 * n_primes)
    counts, used = _decode_varints(buf, x)
    indices, used2 = _decode_varints(buf[used:], n_entries)
    if used + used2 != len(buf) or counts.sum() != n_entries:
        raise CorruptTableError("payload length mismatch")
    offsets = np.zeros(x + 2, dtype=np.int64)
    np.cumsum(counts, out=offsets[2:])
    return OmegaTable(x, basis, offsets, indices.astype(_index_dtype(n_primes)))


def load_or_build(path, x: int, r: int, memory_budget: int = DEFAULT_MEMORY_BUDGET) -> tuple[OmegaTable, bool]:
    """Cached table if valid and matching ``(x, r)``; otherwise rebuild and save. Returns ``(table, rebuilt)``."""
    path = Path(path)
    if path.exists():
        try:
            table = load_omega_table(path)
            if table.x == x and table.r == r:
                return table, False
        except (CorruptTableError, struct.error, ValueError):
            pass
    table = build_omega_table(x, r, memory_budget)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_omega_table(table, path)
    return table, True


# -- integer-side averages --------------------------------------------------


AverageQuery = WindowQuery


@dataclass(frozen=True)
class PolicyReport:
    """Desk-scale diagnostics for a window query on a table."""

    u: float
    m2_cap: float
    policy_ok: bool
    top: float
    top_limit: float


def policy_report(table: OmegaTable, query: WindowQuery) -> PolicyReport:
    """``M2 <= x^0.2`` and the window-top constraint, reported rather than enforced."""
    top = query.m2 * math.exp(float(query.f.log_f_at_exp(math.log(query.m2))))
    limit = float(table.r) if query.scale == "index" else float(table.basis.mertens[-1])
    cap = table.x**POLICY_EXPONENT
    return PolicyReport(math.log(table.x) / math.log(table.r), cap, query.m2 <= cap, top, limit)


def integer_window_statistics(table: OmegaTable, query: WindowQuery) -> np.ndarray:
    """``inf_N sup_{j in window(N)}`` deviation of ``omega(m, j)`` for ``m = 1..x``."""
    plan = plan_windows(table.basis, query)
    n_states = plan.max_state
    out = np.empty(table.x)
    size = max(1, min(_ROW_BLOCK, 4_000_000 // len(plan.point_state)))
    for start, stop, y in table.blocks(n_states, size):
        out[start - 1 : stop - 1] = plan.inf_sup(state_counts(y, n_states))
    return out


def integer_window_average(table: OmegaTable, query: WindowQuery) -> float:
    """Fraction of ``m <= x`` whose window statistic is ``<= z``."""
    stats = integer_window_statistics(table, query)
    return float(np.count_nonzero(stats <= query.barrier.z)) / table.x


# -- events shared by both sides ----------------------------------------------


@dataclass(frozen=True)
class AllEvent:
    description: str = "all"

    def n_primes(self, basis: PrimeBasis) -> int:
        return 0

    def evaluate(self, y: np.ndarray, basis: PrimeBasis) -> np.ndarray:
        return np.ones(y.shape[0], dtype=bool)


@dataclass(frozen=True)
class CylinderEvent:
    """Prescribed divisibility: ``conditions`` maps a prime to required ``p | m``."""

    conditions: tuple  # ((p, divides), ...)
    description: str = "cylinder"

    @classmethod
    def of(cls, mapping: dict, description: str = "") -> CylinderEvent:
        conds = tuple(sorted((int(p), bool(v)) for p, v in mapping.items()))
        text = description or " & ".join(f"{'' if v else 'not '}{p}|m" for p, v in conds)
        return cls(conds, text)

    def _columns(self, basis: PrimeBasis) -> np.ndarray:
        ps = np.array([p for p, _ in self.conditions], dtype=np.int64)
        cols = np.searchsorted(basis.primes, ps)
        if np.any(cols >= basis.n_primes) or np.any(basis.primes[np.minimum(cols, basis.n_primes - 1)] != ps):
            raise ValueError("cylinder condition on a non-prime or a prime above r")
        return cols

    def n_primes(self, basis: PrimeBasis) -> int:
        return int(self._columns(basis).max()) + 1 if self.conditions else 0

    def evaluate(self, y: np.ndarray, basis: PrimeBasis) -> np.ndarray:
        cols = self._columns(basis)
        want = np.array([v for _, v in self.conditions], dtype=bool)
        return np.all(y[:, cols] == want, axis=1)


@dataclass(frozen=True)
class WindowEvent:
    query: WindowQuery
    description: str = "window"

    def n_primes(self, basis: PrimeBasis) -> int:
        return plan_windows(basis, self.query).max_state

    def evaluate(self, y: np.ndarray, basis: PrimeBasis) -> np.ndarray:
        plan = plan_windows(basis, self.query)
        return plan.inf_sup(state_counts(y, plan.max_state)) <= self.query.barrier.z


@dataclass(frozen=True)
class DensityReport:
    description: str
    x: int
    r: int
    integer_side: float
    model_side: float
    model_half_width_ci: float
    model_paths: int
    u: float

    @property
    def discrepancy(self) -> float:
        return abs(self.integer_side - self.model_side)


def integer_density(table: OmegaTable, event) -> float:
    n = event.n_primes(table.basis)
    hits = 0
    for _, _, y in table.blocks(n):
        hits += int(np.count_nonzero(event.evaluate(y, table.basis)))
    return hits / table.x


def model_density(basis: PrimeBasis, event, paths: int, seed: int) -> tuple[float, float]:
    n = event.n_primes(basis)
    hits = 0
    for start, stop in chunks(paths, 1 << 14):
        y = sample_model_batch(basis, seed, start, stop, n)
        hits += int(np.count_nonzero(event.evaluate(y, basis)))
    return hits / paths, wilson_half_width(hits, paths)


def km_discrepancy(table: OmegaTable, model_paths: int, event, seed: int) -> DensityReport:
    """Integer density of ``event`` against its model probability (Monte Carlo)."""
    if model_paths < 1:
        raise ValueError("model_paths must be positive")
    integer_side = integer_density(table, event)
    model_side, hw = model_density(table.basis, event, model_paths, seed)
    return DensityReport(
        event.description,
        table.x,
        table.r,
        integer_side,
        model_side,
        hw,
        model_paths,
        math.log(table.x) / math.log(table.r),
    )


def no_prime_divisor_density(table: OmegaTable, p_lo: float, p_hi: float) -> tuple[float, float]:
    """Density of ``m <= x`` free of primes in ``[p_lo, p_hi]`` and ``prod (1 - 1/p)`` over them."""
    if p_hi > table.r:
        raise WindowRangeError(f"p_hi={p_hi} exceeds r={table.r}")
    primes = table.basis.primes
    lo = int(np.searchsorted(primes, p_lo, side="left"))
    hi = int(np.searchsorted(primes, p_hi, side="right"))
    if lo >= hi:
        return 1.0, 1.0
    inside = (table.indices >= lo) & (table.indices < hi)
    cum = np.concatenate([[0], np.cumsum(inside, dtype=np.int64)])
    hit = cum[table.offsets[2:]] - cum[table.offsets[1:-1]]
    density = float(np.count_nonzero(hit == 0)) / table.x
    euler = float(np.prod(1.0 - 1.0 / primes[lo:hi].astype(float)))
    return density, euler


@dataclass(frozen=True, eq=False)
class FrequencyProfile:
    values: np.ndarray = field(repr=False)  # per m = 1..x
    kappas: np.ndarray
    fractions: np.ndarray  # share of m with value >= kappa
    kappa_hat: float  # 1% quantile: largest kappa with fraction >= 0.99
    exponent: float


def frequency_profile(
    table: OmegaTable,
    z_prime: float,
    c: float,
    z: float,
    n_range: tuple[int, int],
    kappas=None,
    scale: str = "index",
    centering: str = "mertens",
    exponent: float | None = None,
) -> FrequencyProfile:
    """Per ``m``: ``min_{M1<=n<=M2} #{k <= n : window k holds at z'} / n^(1 - c theta)``.

    Window ``k`` is anchored at ``N = e^k`` with ``f = log^c``; ``theta``
    defaults to the decay exponent of barrier ``z``.
    """
    m1, m2 = (int(v) for v in n_range)
    if not 1 <= m1 <= m2:
        raise ValueError("need 1 <= M1 <= M2")
    theta = OU_CLOCK * lambda_of(z) if exponent is None else float(exponent)
    if not z < z_prime:
        raise ValueError("need z < z'")
    if not c * theta < 1:
        raise ValueError("need c theta < 1")
    f = TestFunction.power_log(c)
    query = WindowQuery(math.e, math.exp(m2), f, _as_barrier(z_prime), scale, centering)
    plan = plan_windows(table.basis, query)
    n_states = plan.max_state
    norm = np.arange(m1, m2 + 1, dtype=float) ** (1.0 - c * theta)
    values = np.empty(table.x)
    size = max(1, min(_ROW_BLOCK, 4_000_000 // len(plan.point_state)))
    for start, stop, y in table.blocks(n_states, size):
        hits = plan.window_sups(state_counts(y, n_states)) <= z_prime
        counts = np.cumsum(hits, axis=1)[:, m1 - 1 : m2]
        values[start - 1 : stop - 1] = (counts / norm).min(axis=1)
    if kappas is None:
        kappas = np.linspace(0.0, 1.0, 21)[1:]
    kappas = np.asarray(kappas, dtype=float)
    fractions = np.array([np.mean(values >= k) for k in kappas])
    return FrequencyProfile(values, kappas, fractions, float(np.quantile(values, 0.01)), theta)

"""Desk-scale acceptance suite.

Each criterion returns a :class:`CriterionResult` holding a pass/fail
verdict, a one-line detail and the CSV text it produced.  The CSVs carry no
timings, so their checksums are comparable across reruns (criterion 12).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import ks_2samp

from slowinc.counting import (
    TestFunction,
    borel_cantelli_check,
    count_windows,
    counting_grid,
    fit_sandwich,
)
from slowinc.eigen import (
    OU_CLOCK,
    csaki_bounds,
    lambda_of,
    newell_probability,
    richardson_eigenvalues,
    solve_eigenproblem,
)
from slowinc.kubilius import (
    IndepSumSpec,
    WindowQuery,
    brownian_window_inf_sup,
    build_basis,
    indep_sums_functional,
    ou_indep_comparator,
)
from slowinc.oupath import GridSpec, small_deviation_table
from slowinc.report import csv_text, sha256_text, write_text
from slowinc.sieve import (
    CylinderEvent,
    WindowEvent,
    build_omega_table,
    integer_window_average,
    km_discrepancy,
    no_prime_divisor_density,
    policy_report,
)
from slowinc.streams import module_seed


@dataclass(frozen=True)
class Budget:
    name: str
    smalldev_paths: int
    count_paths: int
    x_values: tuple
    model_paths: int
    brownian_paths: int
    ks_samples: int
    mertens_j_max: int
    identity_x: int


BUDGETS = {
    "fast": Budget("fast", 20_000, 2_000, (10**5, 10**6), 20_000, 10_000, 10_000, 10**6, 10**6),
    "full": Budget("full", 100_000, 2_000, (10**5, 10**6, 10**7), 100_000, 20_000, 10_000, 10**6, 10**7),
}

# Pinned tolerances.
EIGEN_RTOL = 1e-6
EIGEN_SECONDS = 10.0
ASYMPTOTIC_BAND = (0.9, 1.1)
NEWELL_SLACK = 0.01
SMALLDEV_SECONDS = 300.0
SANDWICH_RATIO = 10.0
SANDWICH_COVERAGE = 0.95
BC_P99 = 1.0
MERTENS_GAP = 0.5
KM_SECONDS = 1800.0
BRACKET_EPS = 0.05
EULER_TOL = 0.01
KS_LEVEL = 0.01

ZS = (0.25, 0.5, 1.0, 2.0, 4.0)
SD_ZS = (0.5, 1.0, 2.0)
SD_TS = (1.0, 2.0, 4.0)
SD_STEP = 2.0**-10
SD_LEVELS = 3
COUNT_STEP = 2.0**-7
WINDOW_R = 1000
WINDOW_C = 0.5
WINDOW_M1 = math.e**2
WINDOW_M2 = math.e**6


@dataclass(frozen=True)
class CriterionResult:
    id: int
    name: str
    status: str  # "pass" | "fail" | "skipped"
    detail: str
    csv: str = field(repr=False, default="")
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "pass"


class _Context:
    """Results shared between criteria within one suite run."""

    def __init__(self, budget: Budget, seed: int):
        self.budget = budget
        self.seed = seed
        self._memo = {}

    def seed_for(self, name: str) -> int:
        return module_seed(self.seed, name)

    def memo(self, key, fn):
        if key not in self._memo:
            self._memo[key] = fn()
        return self._memo[key]

    def table(self, x: int):
        # keep only the most recent table: the largest one is ~250 MB
        key = ("table", x)
        if key not in self._memo:
            for k in [k for k in self._memo if k[0] == "table"]:
                del self._memo[k]
            self._memo[key] = build_omega_table(x, WINDOW_R)
        return self._memo[key]


def _verdict(ok: bool) -> str:
    return "pass" if ok else "fail"


def _window_query(z: float = 1.0) -> WindowQuery:
    return WindowQuery(WINDOW_M1, WINDOW_M2, TestFunction.power_log(WINDOW_C), z, "index", "mertens")


def criterion_eigen_oracle(ctx: _Context):
    rows, worst, seconds = [], 0.0, 0.0
    for z in ZS:
        t0 = time.perf_counter()
        lam = solve_eigenproblem(z, depth=1).lam
        seconds += time.perf_counter() - t0
        ref = float(richardson_eigenvalues(z, 1, 2048)[0])
        rel = abs(lam - ref) / ref
        worst = max(worst, rel)
        rows.append((z, lam, ref, rel))
    ok = worst <= EIGEN_RTOL and seconds < EIGEN_SECONDS
    text = csv_text("slowinc.accept.eigen_oracle/1", ["z", "lambda_shoot", "lambda_fd", "rel_diff"], rows)
    return ok, f"max rel diff {worst:.2e} (tol {EIGEN_RTOL:g}); shooting {seconds:.2f}s", text


def criterion_asymptotic(ctx: _Context):
    rows = []
    ratios = []
    for m in range(2, 7):
        z = 2.0**-m
        lam = solve_eigenproblem(z, depth=1).lam
        ratios.append(lam * 4 * z * z / math.pi**2)
        rows.append((z, lam, ratios[-1]))
    z = 0.05
    lam = solve_eigenproblem(z, depth=1).lam
    ref = float(richardson_eigenvalues(z, 1, 2048)[0])
    ratio = lam * 4 * z * z / math.pi**2
    rows.append((z, lam, ratio))
    gaps = [abs(1 - r) for r in ratios]
    monotone = all(b > a for a, b in zip(ratios, ratios[1:])) and all(b < a for a, b in zip(gaps, gaps[1:]))
    oracle_ok = abs(lam - ref) / ref <= EIGEN_RTOL
    ok = monotone and ASYMPTOTIC_BAND[0] <= ratio <= ASYMPTOTIC_BAND[1] and oracle_ok
    text = csv_text("slowinc.accept.asymptotic/1", ["z", "lambda", "ratio"], rows)
    detail = (
        f"ratios m=2..6 {', '.join(f'{r:.5f}' for r in ratios)}; monotone={monotone}; "
        f"z=0.05 ratio {ratio:.5f} in {ASYMPTOTIC_BAND}; oracle agrees={oracle_ok}"
    )
    return ok, detail, text


def _smalldev(ctx: _Context):
    def run():
        t0 = time.perf_counter()
        grid = GridSpec(max(SD_TS), SD_STEP, SD_LEVELS)
        table = small_deviation_table(SD_ZS, SD_TS, ctx.budget.smalldev_paths, grid, ctx.seed_for("smalldev"))
        return table, time.perf_counter() - t0

    return ctx.memo("smalldev", run)


def criterion_newell(ctx: _Context):
    table, seconds = _smalldev(ctx)
    rows, worst_excess, fails = [], -math.inf, 0
    for z in SD_ZS:
        sol = solve_eigenproblem(z, depth=8)
        for t in SD_TS:
            est = table[(z, t)]
            series = newell_probability(sol, OU_CLOCK * t).probability
            diff = abs(est.probability - series)
            excess = diff - (est.half_width_ci + NEWELL_SLACK)
            worst_excess = max(worst_excess, excess)
            fails += excess > 0
            for lvl in est.per_level:
                rows.append((z, t, lvl.step, lvl.probability, lvl.half_width_ci, series))
    ok = fails == 0 and seconds < SMALLDEV_SECONDS
    text = csv_text(
        "slowinc.accept.newell/1", ["z", "t", "step", "p_hat", "half_width_ci", "newell_k8"], rows
    )
    detail = (
        f"{fails} of {len(SD_ZS) * len(SD_TS)} (z,t) outside CI+{NEWELL_SLACK}; "
        f"worst margin {worst_excess:+.4f}; {ctx.budget.smalldev_paths} paths, "
        f"finest step {SD_STEP / 4 ** (SD_LEVELS - 1):g}"
    )
    return ok, detail, text


def criterion_csaki(ctx: _Context):
    table, _ = _smalldev(ctx)
    rows, violations = [], 0
    for z in SD_ZS:
        sol = solve_eigenproblem(z, depth=1)
        for t in SD_TS:
            est = table[(z, t)]
            b = csaki_bounds(z, OU_CLOCK * t, sol)
            inside = b.lower - est.half_width_ci <= est.probability <= b.upper + est.half_width_ci
            violations += not inside
            rows.append((z, t, b.lower, est.probability, b.upper, est.half_width_ci, inside))
    text = csv_text(
        "slowinc.accept.csaki/1", ["z", "t", "lower", "p_hat", "upper", "half_width_ci", "inside"], rows
    )
    return violations == 0, f"{violations} violations of the corridor", text


def _counting(ctx: _Context):
    def run():
        lam = lambda_of(1.0)
        f = TestFunction.power_log(0.5 / lam)
        n = 400
        rep = count_windows(f, 1.0, n, ctx.budget.count_paths, counting_grid(f, n, COUNT_STEP), ctx.seed_for("count"))
        return f, lam, rep

    return ctx.memo("counting", run)


def criterion_sandwich(ctx: _Context):
    f, lam, rep = _counting(ctx)
    k = np.arange(1, 201, dtype=float)
    hits = rep.per_k_hits[:200]
    literal = np.exp(-lam * f.log_f_at_exp(k))
    clocked = np.exp(-rep.exponent * f.log_f_at_exp(k))
    s_lit = fit_sandwich(hits, literal, SANDWICH_COVERAGE)
    s_clk = fit_sandwich(hits, clocked, SANDWICH_COVERAGE)
    ok = all(
        s.k1 > 0 and s.ratio <= SANDWICH_RATIO and s.covered >= SANDWICH_COVERAGE for s in (s_lit, s_clk)
    )
    rows = [(int(kk), h, a, b) for kk, h, a, b in zip(k, hits, literal, clocked)]
    text = csv_text(
        "slowinc.accept.sandwich/1", ["k", "p_hat", "proxy_lambda", "proxy_half_lambda"], rows
    )
    detail = (
        f"f^-lambda: K1={s_lit.k1:.4f} K2={s_lit.k2:.4f} ratio {s_lit.ratio:.3f}; "
        f"f^-lambda/2: K1={s_clk.k1:.4f} K2={s_clk.k2:.4f} ratio {s_clk.ratio:.3f} (limit {SANDWICH_RATIO:g})"
    )
    return ok, detail, text


def criterion_borel_cantelli(ctx: _Context):
    _, _, rep = _counting(ctx)
    checkpoints = [100, 200, 400]
    bc = borel_cantelli_check(rep.events, rep.per_k_hits, checkpoints=checkpoints)
    p99 = [bc.p99_by_n[n] for n in checkpoints]
    ok = all(v < BC_P99 for v in p99) and not bc.flag
    psi = np.cumsum(rep.per_k_hits)
    rows = [(n, float(psi[n - 1]), bc.p99_by_n[n]) for n in checkpoints]
    text = csv_text("slowinc.accept.borel_cantelli/1", ["n", "psi_n", "p99_ratio"], rows)
    detail = f"p99 at n=100,200,400: {', '.join(f'{v:.3f}' for v in p99)}; growth flag={bc.flag}"
    return ok, detail, text


def criterion_mertens(ctx: _Context):
    j_max = ctx.budget.mertens_j_max
    gap = build_basis(j_max).mertens_gap(10)
    x = ctx.budget.identity_x
    table = ctx.table(x)
    expected = int(sum(x // int(p) for p in table.basis.primes))
    total = int(table.omega_all(table.r).sum())
    ok = gap <= MERTENS_GAP and total == expected
    rows = [("mertens_gap", j_max, gap), ("sum_omega", x, total), ("sum_floor_x_over_p", x, expected)]
    text = csv_text("slowinc.accept.mertens/1", ["quantity", "bound", "value"], rows)
    return ok, f"max |s_j^2 - loglog j| = {gap:.4f} (j<={j_max}); identity {total} == {expected}", text


def _model_window(ctx: _Context, table):
    """Window-event model side at fixed r, computed once for the x-sweep."""
    event = WindowEvent(_window_query())
    return ctx.memo(
        "model_window", lambda: km_discrepancy(table, ctx.budget.model_paths, event, ctx.seed_for("kubilius"))
    )


def criterion_km(ctx: _Context):
    t0 = time.perf_counter()
    rows, odd_ok, disc = [], True, []
    odd = CylinderEvent.of({2: False})
    for x in ctx.budget.x_values:
        table = ctx.table(x)
        rep = km_discrepancy(table, ctx.budget.model_paths, odd, ctx.seed_for("kubilius.odd"))
        odd_ok &= rep.discrepancy <= rep.model_half_width_ci + 1.0 / x
        rows.append(("odd", x, rep.integer_side, rep.model_side, rep.model_half_width_ci, rep.discrepancy, rep.u))
        model = _model_window(ctx, table)
        integer_side = ctx.memo(("window_avg", x), lambda: integer_window_average(table, _window_query()))
        d = abs(integer_side - model.model_side)
        disc.append((d, model.model_half_width_ci))
        rows.append(("window", x, integer_side, model.model_side, model.model_half_width_ci, d, rep.u))
    trend_ok = all(b[0] <= a[0] + 2 * a[1] for a, b in zip(disc, disc[1:]))
    seconds = time.perf_counter() - t0
    ok = odd_ok and trend_ok and seconds < KM_SECONDS
    text = csv_text(
        "slowinc.accept.km/1",
        ["event", "x", "integer_side", "model_side", "model_half_width_ci", "discrepancy", "u"],
        rows,
    )
    detail = (
        f"odd cylinder within CI+1/x: {odd_ok}; window discrepancies "
        f"{', '.join(f'{d:.4f}' for d, _ in disc)} (2xCI {2 * disc[0][1]:.4f}); non-increasing={trend_ok}"
    )
    return ok, detail, text


def criterion_bracket(ctx: _Context):
    x = max(ctx.budget.x_values)
    table = ctx.table(x)
    query = _window_query()
    integer_side = ctx.memo(("window_avg", x), lambda: integer_window_average(table, query))
    seed = ctx.seed_for("brownian")
    paths = ctx.budget.brownian_paths
    lo = brownian_window_inf_sup(table.basis, _window_query(1.0 - BRACKET_EPS), paths, seed)
    mid = brownian_window_inf_sup(table.basis, _window_query(1.0), paths, seed)
    hi = brownian_window_inf_sup(table.basis, _window_query(1.0 + BRACKET_EPS), paths, seed)
    ok = lo.fraction - lo.half_width_ci <= integer_side <= hi.fraction + hi.half_width_ci
    pol = policy_report(table, query)
    rows = [
        ("integer_side", 1.0, integer_side, 0.0),
        ("brownian", 1.0 - BRACKET_EPS, lo.fraction, lo.half_width_ci),
        ("brownian", 1.0, mid.fraction, mid.half_width_ci),
        ("brownian", 1.0 + BRACKET_EPS, hi.fraction, hi.half_width_ci),
    ]
    text = csv_text("slowinc.accept.bracket/1", ["quantity", "z", "value", "half_width_ci"], rows)
    detail = (
        f"x={x}: integer {integer_side:.4f} vs Brownian [{lo.fraction:.4f}, {hi.fraction:.4f}] "
        f"(+-{max(lo.half_width_ci, hi.half_width_ci):.4f}); u={pol.u:.2f}, M2<=x^0.2: {pol.policy_ok}"
    )
    return ok, detail, text


def criterion_euler(ctx: _Context):
    x = max(ctx.budget.x_values)
    density, euler = no_prime_divisor_density(ctx.table(x), 2, 30)
    ok = abs(density - euler) <= EULER_TOL
    text = csv_text("slowinc.accept.euler/1", ["x", "density", "euler_product"], [(x, density, euler)])
    return ok, f"x={x}: density {density:.6f} vs product {euler:.6f}", text


def criterion_gaussian(ctx: _Context):
    f = TestFunction.power_log(0.5 / lambda_of(1.0))
    k_max, n = 8, ctx.budget.ks_samples
    sums = indep_sums_functional(IndepSumSpec("gaussian"), f, k_max, n, ctx.seed_for("indep"))
    ou = ou_indep_comparator(f, k_max, n, ctx.seed_for("indep.ou"))
    p_last = float(ks_2samp(sums.sups[:, -1], ou.sups[:, -1]).pvalue)
    p_min = float(ks_2samp(sums.running_min[:, -1], ou.running_min[:, -1]).pvalue)
    ok = p_last >= KS_LEVEL and p_min >= KS_LEVEL
    rows = [("last_window_sup", k_max, n, p_last), ("running_min", k_max, n, p_min)]
    text = csv_text("slowinc.accept.gaussian/1", ["statistic", "k_max", "samples", "ks_pvalue"], rows)
    return ok, f"KS p-values: last window {p_last:.3f}, running min {p_min:.3f} (reject below {KS_LEVEL})", text


CRITERIA = {
    1: ("eigen oracle equivalence", criterion_eigen_oracle),
    2: ("asymptotic exponent", criterion_asymptotic),
    3: ("Newell vs Monte Carlo", criterion_newell),
    4: ("Csaki corridor", criterion_csaki),
    5: ("counting sandwich", criterion_sandwich),
    6: ("Borel-Cantelli surrogate", criterion_borel_cantelli),
    7: ("Mertens bookkeeping", criterion_mertens),
    8: ("Kubilius vs integers", criterion_km),
    9: ("window bracket", criterion_bracket),
    10: ("Euler-product density", criterion_euler),
    11: ("Gaussian exactness", criterion_gaussian),
}
DETERMINISM_ID = 12


def _run_one(cid: int, ctx: _Context) -> CriterionResult:
    name, fn = CRITERIA[cid]
    t0 = time.perf_counter()
    ok, detail, text = fn(ctx)
    return CriterionResult(cid, name, _verdict(ok), detail, text, time.perf_counter() - t0)


def run_suite(budget: str = "fast", seed: int = 7, ids=None, out_dir=None, progress=None) -> list[CriterionResult]:
    """Run the selected criteria (default: all, including the determinism rerun)."""
    if budget not in BUDGETS:
        raise ValueError(f"budget must be one of {sorted(BUDGETS)}")
    wanted = sorted(set(ids) if ids is not None else set(CRITERIA) | {DETERMINISM_ID})
    unknown = [i for i in wanted if i not in CRITERIA and i != DETERMINISM_ID]
    if unknown:
        raise ValueError(f"unknown criteria {unknown}")
    ctx = _Context(BUDGETS[budget], seed)
    results = []
    for cid in [i for i in wanted if i in CRITERIA]:
        res = _run_one(cid, ctx)
        results.append(res)
        if progress:
            progress(res)
    if DETERMINISM_ID in wanted:
        res = _determinism(results, budget, seed)
        results.append(res)
        if progress:
            progress(res)
    if out_dir is not None:
        write_suite(results, out_dir)
    return results


def _determinism(first: list[CriterionResult], budget: str, seed: int) -> CriterionResult:
    t0 = time.perf_counter()
    if not first:
        return CriterionResult(DETERMINISM_ID, "determinism", "skipped", "no criteria ran")
    ctx = _Context(BUDGETS[budget], seed)
    rows, mismatched = [], []
    for res in first:
        again = _run_one(res.id, ctx)
        a, b = sha256_text(res.csv), sha256_text(again.csv)
        rows.append((res.id, a, b, a == b))
        if a != b:
            mismatched.append(res.id)
    text = csv_text("slowinc.accept.determinism/1", ["criterion", "sha256_first", "sha256_rerun", "equal"], rows)
    detail = f"{len(first) - len(mismatched)}/{len(first)} criteria reproduced bit-identical CSVs"
    if mismatched:
        detail += f"; mismatched {mismatched}"
    return CriterionResult(
        DETERMINISM_ID, "determinism", _verdict(not mismatched), detail, text, time.perf_counter() - t0
    )


def summary_csv(results: list[CriterionResult]) -> str:
    rows = [(r.id, r.name, r.status, sha256_text(r.csv), r.detail.replace(",", ";")) for r in results]
    return csv_text("slowinc.accept.summary/1", ["criterion", "name", "status", "csv_sha256", "detail"], rows)


def write_suite(results: list[CriterionResult], out_dir) -> dict:
    out = Path(out_dir)
    files = {}
    for r in results:
        path = out / f"criterion_{r.id:02d}.csv"
        write_text(path, r.csv)
        files[path.name] = sha256_text(r.csv)
    table = summary_csv(results)
    write_text(out / "acceptance.csv", table)
    files["acceptance.csv"] = sha256_text(table)
    return files


def format_line(r: CriterionResult) -> str:
    return f"[{r.status.upper():4}] criterion {r.id:2d} ({r.name}): {r.detail} [{r.seconds:.1f}s]"

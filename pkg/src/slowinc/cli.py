"""Command-line entry point: ``slowinc <subcommand> [options]``.

Parameter precedence is flags > ``--config`` file (``key = value`` lines) >
built-in defaults.  Every run writes its CSV/JSON outputs and a
``manifest.json`` (config echo, version, wall time, sha256 of each output)
into ``--out``.  Failures print one JSON object on stderr.

Exit codes: 0 success, 1 acceptance failure or runtime error,
2 invalid parameter, 3 unknown subcommand, 4 I/O failure.

Seeds: the global ``--seed`` is expanded per stage by
:func:`slowinc.streams.module_seed` (first 8 bytes, little-endian, of
``sha256("<seed>:<stage>")``).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from slowinc import __version__
from slowinc.report import csv_text, sha256_text, write_json, write_text
from slowinc.streams import module_seed

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_UNKNOWN_COMMAND = 3
EXIT_IO = 4
CACHE_ENV = "SLOWINC_CACHE"


class InvalidParameter(ValueError):
    pass


# -- value parsing --------------------------------------------------------

_POWER = re.compile(r"^\s*(e|[0-9]*\.?[0-9]+)\s*\^\s*([+-]?[0-9]*\.?[0-9]+)\s*$")


def parse_real(text) -> float:
    """Float, or ``base^exp`` with base ``e`` or a number (``e^2``, ``2^-10``, ``10^7``)."""
    if isinstance(text, (int, float)):
        return float(text)
    m = _POWER.match(str(text))
    if m:
        base = math.e if m.group(1) == "e" else float(m.group(1))
        value = base ** float(m.group(2))
    else:
        try:
            value = float(text)
        except ValueError:
            raise InvalidParameter(f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise InvalidParameter(f"not finite: {text!r}")
    return value


def parse_int(text) -> int:
    value = parse_real(text)
    if value != int(value):
        raise InvalidParameter(f"not an integer: {text!r}")
    return int(value)


def parse_reals(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [parse_real(v) for v in text]
    parts = [p for p in str(text).split(",") if p.strip()]
    if not parts:
        raise InvalidParameter("empty list")
    return [parse_real(p) for p in parts]


@dataclass(frozen=True)
class Param:
    name: str
    parse: object
    default: object
    help: str
    choices: tuple | None = None


_COMMON = (
    Param("seed", parse_int, 7, "global seed"),
    Param("out", str, None, "output directory (default: slowinc-out/<subcommand>)"),
)

COMMANDS: dict[str, tuple[str, tuple[Param, ...]]] = {
    "eigen": (
        "eigenvalues and eigenfunctions for a barrier",
        (
            Param("z", parse_real, 1.0, "barrier half-width"),
            Param("depth", parse_int, 8, "number of eigenpairs K"),
            Param("grid_step", parse_real, None, "eigenfunction grid step"),
            Param("t", parse_reals, None, "times (OU clock) for the series and the corridor"),
        ),
    ),
    "smalldev": (
        "Monte Carlo small-deviation probabilities against the series",
        (
            Param("z", parse_reals, [1.0], "barrier(s), comma separated"),
            Param("t", parse_reals, [2.0], "time(s), comma separated"),
            Param("paths", parse_int, 100_000, "simulated paths"),
            Param("step", parse_real, 2.0**-10, "base grid step"),
            Param("levels", parse_int, 3, "grid levels step/4^l"),
            Param("depth", parse_int, 8, "series terms K"),
        ),
    ),
    "count": (
        "window events and their counting function",
        (
            Param("z", parse_real, 1.0, "barrier"),
            Param("c", parse_real, 0.25, "exponent of f(t) = log^c t"),
            Param("n", parse_int, 400, "number of windows"),
            Param("paths", parse_int, 2000, "simulated paths"),
            Param("step", parse_real, 2.0**-7, "grid step"),
            Param("a", parse_real, 1.6, "Borel-Cantelli log exponent"),
        ),
    ),
    "kubilius": (
        "windowed statistic under the independent prime model",
        (
            Param("r", parse_int, 1000, "prime cutoff"),
            Param("paths", parse_int, 10_000, "model paths"),
            Param("z", parse_real, 1.0, "barrier"),
            Param("c", parse_real, 0.5, "exponent of f(t) = log^c t"),
            Param("m1", parse_real, math.e**2, "smallest anchor N"),
            Param("m2", parse_real, math.e**6, "largest anchor N"),
            Param("scale", str, "index", "window scale", ("index", "mertens")),
            Param("centering", str, "mertens", "deviation centering", ("mertens", "mean", "loglog")),
        ),
    ),
    "sieve": (
        "build the truncated prime-divisor table",
        (
            Param("x", parse_int, 10**6, "largest integer"),
            Param("r", parse_int, 1000, "prime cutoff"),
            Param("save", str, None, "write the table to this binary file"),
            Param("memory_budget", parse_int, 2 * 1024**3, "bytes allowed for the table"),
        ),
    ),
    "compare": (
        "integers vs model vs Brownian for the window statistic",
        (
            Param("x", parse_int, 10**7, "largest integer"),
            Param("r", parse_int, 1000, "prime cutoff"),
            Param("z", parse_real, 1.0, "barrier"),
            Param("c", parse_real, 0.5, "exponent of f(t) = log^c t"),
            Param("m1", parse_real, math.e**2, "smallest anchor N"),
            Param("m2", parse_real, math.e**6, "largest anchor N"),
            Param("paths", parse_int, 20_000, "model and Brownian paths"),
            Param("eps", parse_real, 0.05, "barrier bracket half-width"),
            Param("scale", str, "index", "window scale", ("index", "mertens")),
            Param("centering", str, "mertens", "deviation centering", ("mertens", "mean", "loglog")),
            Param("cache_dir", str, None, f"table cache directory (default: ${CACHE_ENV})"),
        ),
    ),
    "reproduce": (
        "run the acceptance suite",
        (Param("budget", str, "fast", "compute budget", ("fast", "full")),),
    ),
}


def _params(command: str) -> tuple[Param, ...]:
    return COMMANDS[command][1] + _COMMON


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys equal underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParameter(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


class _Parser(argparse.ArgumentParser):
    # subparsers inherit this class, so every usage error takes the JSON path
    def error(self, message):
        raise InvalidParameter(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slowinc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"slowinc {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    for name, (text, params) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key = value file (flags override it)")
        for prm in params + _COMMON:
            default = prm.default if not isinstance(prm.default, list) else ",".join(map(str, prm.default))
            p.add_argument(
                "--" + prm.name.replace("_", "-"),
                dest=prm.name,
                help=f"{prm.help} (default: {default})",
                choices=prm.choices,
            )
    return parser


def resolve_config(command: str, flags: dict) -> dict:
    """Merge defaults, the config file and explicit flags, parsing every value."""
    params = {p.name: p for p in _params(command)}
    merged = {name: p.default for name, p in params.items()}
    raw = {}
    if flags.get("config"):
        try:
            raw.update(read_config(flags["config"]))
        except OSError as exc:
            raise InvalidParameter(f"cannot read config {flags['config']}: {exc}") from None
    unknown = sorted(set(raw) - set(params))
    if unknown:
        raise InvalidParameter(f"unknown config key(s) for {command}: {unknown}")
    raw.update({k: v for k, v in flags.items() if k in params})
    for key, value in raw.items():
        prm = params[key]
        parsed = prm.parse(value)
        if prm.choices and parsed not in prm.choices:
            raise InvalidParameter(f"{key} must be one of {prm.choices}")
        merged[key] = parsed
    if merged["out"] is None:
        merged["out"] = str(Path("slowinc-out") / command)
    return merged


# -- output bookkeeping -----------------------------------------------------


class Outputs:
    """Writes one file at a time and records its checksum."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.checksums: dict[str, str] = {}

    def csv(self, name: str, text: str) -> None:
        write_text(self.dir / name, text)
        self.checksums[name] = sha256_text(text)

    def json(self, name: str, payload) -> None:
        # summaries may carry run-dependent facts (cache hits); only CSVs are checksummed
        write_json(self.dir / name, payload)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise InvalidParameter(message)


def _seed(cfg, stage: str) -> int:
    return module_seed(cfg["seed"], stage)


# -- subcommands -------------------------------------------------------------


def run_eigen(cfg, out: Outputs) -> dict:
    from slowinc.eigen import OU_CLOCK, Barrier, csaki_bounds, newell_probability, solve_eigenproblem

    barrier = Barrier(cfg["z"])
    _require(cfg["depth"] >= 1, "depth must be >= 1")
    times = cfg["t"] or []
    _require(all(t > 0 for t in times), "t must be positive")
    sol = solve_eigenproblem(barrier, cfg["depth"], cfg["grid_step"])
    rows = [(k, lam, a) for k, (lam, a) in enumerate(zip(sol.eigenvalues, sol.weights), start=1)]
    out.csv("eigen_values.csv", csv_text("slowinc.eigen.values/1", ["k", "lambda_k", "a_k"], rows))
    header = ["x"] + [f"psi_{k}" for k in range(1, sol.depth + 1)]
    grid_rows = np.column_stack([sol.grid, sol.eigenfunctions.T]).tolist()
    out.csv("eigen_grid.csv", csv_text("slowinc.eigen.grid/1", header, grid_rows))
    series = []
    for t in times:
        nv = newell_probability(sol, OU_CLOCK * t)
        cb = csaki_bounds(barrier, OU_CLOCK * t, sol)
        series.append((t, nv.probability, nv.last_term, cb.lower, cb.upper))
    if series:
        out.csv(
            "eigen_series.csv",
            csv_text("slowinc.eigen.series/1", ["t", "newell", "last_term", "csaki_lower", "csaki_upper"], series),
        )
    return {"z": barrier.z, "lambda": sol.lam, "eigenvalues": sol.eigenvalues, "ou_clock": OU_CLOCK}


def run_smalldev(cfg, out: Outputs) -> dict:
    from slowinc.eigen import OU_CLOCK, Barrier, csaki_bounds, newell_probability, solve_eigenproblem
    from slowinc.oupath import GridSpec, small_deviation_table

    zs = [Barrier(z).z for z in cfg["z"]]
    ts = cfg["t"]
    _require(all(t > 0 for t in ts), "t must be positive")
    _require(cfg["paths"] >= 1, "paths must be >= 1")
    grid = GridSpec(max(ts), cfg["step"], cfg["levels"])
    table = small_deviation_table(zs, ts, cfg["paths"], grid, _seed(cfg, "smalldev"))
    rows, headline = [], []
    for z in zs:
        sol = solve_eigenproblem(z, cfg["depth"])
        for t in ts:
            est = table[(z, t)]
            series = newell_probability(sol, OU_CLOCK * t).probability
            cb = csaki_bounds(z, OU_CLOCK * t, sol)
            for level, lvl in enumerate(est.per_level):
                rows.append(
                    (z, t, level, lvl.step, cfg["paths"], lvl.probability, lvl.half_width_ci,
                     cfg["depth"], series, cb.lower, cb.upper)
                )
            headline.append(
                {"z": z, "t": t, "p_hat": est.probability, "half_width_ci": est.half_width_ci, "newell": series}
            )
    cols = ["z", "t", "level", "step", "paths", "estimate", "ci", "newell_K", "newell_value", "csaki_lower", "csaki_upper"]
    out.csv("smalldev.csv", csv_text("slowinc.smalldev/2", cols, rows))
    return {"paths": cfg["paths"], "estimates": headline}


def run_count(cfg, out: Outputs) -> dict:
    from slowinc.counting import (
        TestFunction,
        borel_cantelli_check,
        count_windows,
        counting_grid,
        fit_sandwich,
    )
    from slowinc.eigen import Barrier

    barrier = Barrier(cfg["z"])
    f = TestFunction.power_log(cfg["c"])
    n, paths = cfg["n"], cfg["paths"]
    _require(n >= 1 and paths >= 1, "n and paths must be >= 1")
    _require(cfg["a"] > 1.5, "a must exceed 3/2")
    rep = count_windows(f, barrier, n, paths, counting_grid(f, n, cfg["step"]), _seed(cfg, "count"))
    k = np.arange(1, n + 1, dtype=float)
    f_val = np.exp(f.log_f_at_exp(k))
    rows = list(zip(k.astype(int), f_val, rep.per_k_hits, rep.proxy_terms))
    out.csv("counting.csv", csv_text("slowinc.count/1", ["k", "f_val", "p_hat", "proxy_term"], rows))
    sandwich = fit_sandwich(rep.per_k_hits, rep.proxy_terms)
    checkpoints = sorted({max(1, n // 4), max(1, n // 2), n})
    bc = borel_cantelli_check(rep.events, rep.per_k_hits, cfg["a"], checkpoints)
    return {
        "n": n,
        "paths": paths,
        "lambda": rep.lambda_used,
        "exponent": rep.exponent,
        "mean_proxy": rep.mean_proxy,
        "N_n_percentiles": {str(q): float(np.percentile(rep.realized, q)) for q in (5, 25, 50, 75, 95)},
        "K1_hat": sandwich.k1,
        "K2_hat": sandwich.k2,
        "min_sup_median": float(np.median(rep.min_sup[:, -1])),
        "borel_cantelli": {
            "psi_n": bc.psi,
            "p99_by_n": {str(h): v for h, v in bc.p99_by_n.items()},
            "flag": bc.flag,
            "meaningful": bc.meaningful,
        },
    }


def _window_query(cfg, z=None):
    from slowinc.counting import TestFunction
    from slowinc.kubilius import WindowQuery

    return WindowQuery(
        cfg["m1"], cfg["m2"], TestFunction.power_log(cfg["c"]), cfg["z"] if z is None else z,
        cfg["scale"], cfg["centering"],
    )


def run_kubilius(cfg, out: Outputs) -> dict:
    from slowinc.kubilius import brownian_window_inf_sup, build_basis, model_window_sups, plan_windows

    _require(cfg["paths"] >= 1, "paths must be >= 1")
    basis = build_basis(cfg["r"])
    query = _window_query(cfg)
    plan = plan_windows(basis, query)
    sups = model_window_sups(basis, query, cfg["paths"], _seed(cfg, "kubilius"))
    qs = (5, 25, 50, 75, 95)
    rows = []
    for w, k in enumerate(plan.ks):
        quant = np.percentile(sups[:, w], qs)
        rows.append((int(k), plan.lo_j[w], plan.hi_j[w], int(plan.lo_state[w]), int(plan.hi_state[w]), *quant))
    cols = ["k", "window_lo_j", "window_hi_j", "lo_state", "hi_state"] + [f"sup_q{q:02d}" for q in qs]
    out.csv("kubilius.csv", csv_text("slowinc.kubilius/1", cols, rows))
    stats = sups.min(axis=1)
    hits = int(np.count_nonzero(stats <= query.barrier.z))
    from slowinc._stats import wilson_half_width

    summary = {
        "paths": cfg["paths"],
        "fraction": hits / cfg["paths"],
        "half_width_ci": wilson_half_width(hits, cfg["paths"]),
        "s_r_squared": float(basis.mertens[-1]),
    }
    if query.centering != "loglog":
        bw = brownian_window_inf_sup(basis, query, cfg["paths"], _seed(cfg, "brownian"))
        summary["brownian_fraction"] = bw.fraction
        summary["brownian_half_width_ci"] = bw.half_width_ci
    return summary


def _table(cfg, x, r):
    from slowinc.sieve import build_omega_table, load_or_build

    cache = cfg.get("cache_dir") or os.environ.get(CACHE_ENV)
    if not cache:
        return build_omega_table(x, r), None
    table, rebuilt = load_or_build(Path(cache) / f"omega_x{x}_r{r}.bin", x, r)
    return table, rebuilt


def run_sieve(cfg, out: Outputs) -> dict:
    from slowinc.sieve import build_omega_table, save_omega_table, table_bytes
    from slowinc.primes import primes_up_to

    x, r = cfg["x"], cfg["r"]
    _require(x >= 2 and 2 <= r <= x, "need x >= 2 and 2 <= r <= x")
    table = build_omega_table(x, r, cfg["memory_budget"])
    omega = table.omega_all(r)[1:]
    values, counts = np.unique(omega, return_counts=True)
    out.csv("omega_distribution.csv", csv_text("slowinc.sieve.omega/1", ["omega", "count"], zip(values, counts)))
    expected = int(sum(x // int(p) for p in table.basis.primes))
    if cfg["save"]:
        save_omega_table(table, cfg["save"])
    return {
        "x": x,
        "r": r,
        "n_primes": table.basis.n_primes,
        "n_entries": table.n_entries,
        "double_counting_holds": table.n_entries == expected == int(omega.sum()),
        "table_bytes": table_bytes(x, primes_up_to(r)),
        "saved_to": cfg["save"],
    }


def run_compare(cfg, out: Outputs) -> dict:
    from slowinc.kubilius import brownian_window_inf_sup, plan_windows
    from slowinc.sieve import CylinderEvent, WindowEvent, integer_window_average, km_discrepancy, policy_report

    _require(cfg["paths"] >= 1, "paths must be >= 1")
    _require(0 < cfg["eps"] < cfg["z"], "need 0 < eps < z")
    _require(2 <= cfg["r"] <= cfg["x"], "need 2 <= r <= x")
    query = _window_query(cfg)
    from slowinc.kubilius import build_basis

    plan_windows(build_basis(cfg["r"]), query)  # validates windows before the sieve runs
    table, rebuilt = _table(cfg, cfg["x"], cfg["r"])
    seed = _seed(cfg, "kubilius")
    integer_side = integer_window_average(table, query)
    model = km_discrepancy(table, cfg["paths"], WindowEvent(query), seed)
    odd = km_discrepancy(table, cfg["paths"], CylinderEvent.of({2: False}), _seed(cfg, "kubilius.odd"))
    rows = [
        ("integer_side", cfg["z"], integer_side, 0.0),
        ("model_side", cfg["z"], model.model_side, model.model_half_width_ci),
        ("odd_integer_side", "", odd.integer_side, 0.0),
        ("odd_model_side", "", odd.model_side, odd.model_half_width_ci),
    ]
    bracket = {}
    if query.centering != "loglog":
        for label, z in (("lower", cfg["z"] - cfg["eps"]), ("center", cfg["z"]), ("upper", cfg["z"] + cfg["eps"])):
            bw = brownian_window_inf_sup(table.basis, _window_query(cfg, z), cfg["paths"], _seed(cfg, "brownian"))
            rows.append((f"brownian_{label}", z, bw.fraction, bw.half_width_ci))
            bracket[label] = bw
    out.csv("compare.csv", csv_text("slowinc.compare/1", ["quantity", "z", "value", "half_width_ci"], rows))
    pol = policy_report(table, query)
    summary = {
        "x": table.x,
        "r": table.r,
        "u": pol.u,
        "policy_ok": pol.policy_ok,
        "m2_cap": pol.m2_cap,
        "integer_side": integer_side,
        "model_side": model.model_side,
        "model_half_width_ci": model.model_half_width_ci,
        "discrepancy": abs(integer_side - model.model_side),
        "table_rebuilt": rebuilt,
    }
    if bracket:
        lo, hi = bracket["lower"], bracket["upper"]
        summary["brownian_bracket"] = [lo.fraction, hi.fraction]
        summary["inside_bracket"] = bool(
            lo.fraction - lo.half_width_ci <= integer_side <= hi.fraction + hi.half_width_ci
        )
    return summary


def run_reproduce(cfg, out: Outputs) -> dict:
    from slowinc.acceptance import format_line, run_suite, summary_csv

    results = run_suite(cfg["budget"], cfg["seed"], progress=lambda r: print(format_line(r), flush=True))
    for r in results:
        out.csv(f"criterion_{r.id:02d}.csv", r.csv)
    out.csv("acceptance.csv", summary_csv(results))
    return {
        "budget": cfg["budget"],
        "results": [{"criterion": r.id, "name": r.name, "status": r.status, "detail": r.detail} for r in results],
        "all_passed": all(r.status in ("pass", "skipped") for r in results),
    }


RUNNERS = {
    "eigen": run_eigen,
    "smalldev": run_smalldev,
    "count": run_count,
    "kubilius": run_kubilius,
    "sieve": run_sieve,
    "compare": run_compare,
    "reproduce": run_reproduce,
}


def run(command: str, cfg: dict) -> dict:
    """Execute one subcommand and write its manifest; returns the manifest."""
    t0 = time.perf_counter()
    out = Outputs(cfg["out"])
    summary = RUNNERS[command](cfg, out)
    out.json("summary.json", summary)
    manifest = {
        "artifact": "slowinc",
        "version": __version__,
        "subcommand": command,
        "config": cfg,
        "seed_derivation": "module_seed(seed, stage) = sha256(f'{seed}:{stage}')[:8] little-endian",
        "wall_time_s": time.perf_counter() - t0,
        "checksums": out.checksums,
    }
    write_json(out.dir / "manifest.json", manifest)
    manifest["summary"] = summary
    return manifest


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        return _fail("unknown_subcommand", f"unknown subcommand {argv[0]!r}; choose from {sorted(COMMANDS)}", EXIT_UNKNOWN_COMMAND)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except InvalidParameter as exc:
        return _fail("invalid_parameter", str(exc), EXIT_INVALID)
    if ns.command is None:
        parser.print_help(sys.stderr)
        return _fail("missing_subcommand", "a subcommand is required", EXIT_INVALID)
    flags = {k: v for k, v in vars(ns).items() if k != "command"}
    try:
        cfg = resolve_config(ns.command, flags)
        manifest = run(ns.command, cfg)
    except OSError as exc:
        return _fail("io_failure", str(exc), EXIT_IO)
    except (InvalidParameter, ValueError) as exc:
        return _fail("invalid_parameter", str(exc), EXIT_INVALID)
    except MemoryError as exc:
        return _fail("memory_budget", str(exc), EXIT_INVALID)
    print(json.dumps({"out": str(Path(cfg["out"])), "checksums": manifest["checksums"]}, sort_keys=True))
    if ns.command == "reproduce" and not manifest["summary"]["all_passed"]:
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

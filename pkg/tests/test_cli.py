import json
import math

import pytest

from slowinc import acceptance, cli
from slowinc.acceptance import CriterionResult
from slowinc.cli import InvalidParameter, main, parse_int, parse_real, parse_reals, resolve_config


def _run(argv, capsys):
    code = main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.mark.parametrize(
    "text, value",
    [("e^2", math.e**2), ("2^-10", 2.0**-10), ("10^7", 1e7), ("0.5", 0.5), (" e ^ 1.5 ", math.e**1.5), (3, 3.0)],
)
def test_parse_real_forms(text, value):
    assert parse_real(text) == pytest.approx(value)


def test_parse_errors():
    for bad in ("abc", "inf", "1e999"):
        with pytest.raises(InvalidParameter):
            parse_real(bad)
    with pytest.raises(InvalidParameter):
        parse_int("2.5")
    assert parse_int("10^3") == 1000
    assert parse_reals("0.5, 1,e^1") == pytest.approx([0.5, 1.0, math.e])
    with pytest.raises(InvalidParameter):
        parse_reals(" , ")


def test_config_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nz = 2.0\ndepth = 5   # trailing\ngrid-step = 0.01\n")
    cfg = resolve_config("eigen", {"config": str(conf), "depth": "3"})
    assert cfg["z"] == 2.0  # file beats default
    assert cfg["depth"] == 3  # flag beats file
    assert cfg["grid_step"] == 0.01
    assert cfg["seed"] == 7  # default
    assert cfg["out"].endswith("eigen")


def test_unknown_config_key_is_invalid(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("zz = 1\n")
    code, _, err = _run(["eigen", "--config", str(conf), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    assert json.loads(err)["error"] == "invalid_parameter"


def test_unknown_subcommand(capsys):
    code, _, err = _run(["frobnicate"], capsys)
    assert code == 3
    assert json.loads(err)["exit_code"] == 3


@pytest.mark.parametrize(
    "argv",
    [
        ["eigen", "--z", "-1"],
        ["eigen", "--depth", "0"],
        ["eigen", "--bogus", "1"],
        ["kubilius", "--scale", "weird"],
        ["kubilius", "--r", "500"],  # window top above r
        ["count", "--a", "1.2"],
        ["smalldev", "--z", "nope"],
    ],
)
def test_invalid_parameters_exit_2(argv, tmp_path, capsys):
    code, _, err = _run(argv + ["--out", str(tmp_path / "o")], capsys)
    assert code == 2, err
    assert "message" in json.loads(err.strip().splitlines()[-1])


def test_io_failure_exit_4(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = _run(["eigen", "--depth", "2", "--out", str(blocker / "sub")], capsys)
    assert code == 4
    assert json.loads(err)["error"] == "io_failure"


def test_eigen_outputs_and_stable_checksums(tmp_path, capsys):
    argv = ["eigen", "--depth", "8", "--t", "1,2"]
    code, out, _ = _run(argv + ["--out", str(tmp_path / "a")], capsys)
    assert code == 0
    first = json.loads(out)["checksums"]
    _run(argv + ["--out", str(tmp_path / "b")], capsys)
    second = json.loads((tmp_path / "b" / "manifest.json").read_text())["checksums"]
    assert first == second
    lines = (tmp_path / "a" / "eigen_values.csv").read_text().splitlines()
    assert len(lines) == 2 + 8
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["depth"] == 8
    assert set(manifest["checksums"]) == {"eigen_values.csv", "eigen_grid.csv", "eigen_series.csv"}
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["lambda"] == pytest.approx(2.0)


def test_smalldev_deterministic(tmp_path, capsys):
    argv = ["smalldev", "--paths", "300", "--step", "2^-6", "--levels", "2", "--t", "0.5,1", "--z", "1"]
    _run(argv + ["--out", str(tmp_path / "a")], capsys)
    _run(argv + ["--out", str(tmp_path / "b")], capsys)
    a = (tmp_path / "a" / "smalldev.csv").read_text()
    assert a == (tmp_path / "b" / "smalldev.csv").read_text()
    assert len(a.splitlines()) == 2 + 2 * 2
    _run(argv + ["--seed", "8", "--out", str(tmp_path / "c")], capsys)
    assert a != (tmp_path / "c" / "smalldev.csv").read_text()


def test_count_and_kubilius_and_sieve(tmp_path, capsys):
    code, _, err = _run(["count", "--n", "20", "--paths", "50", "--step", "2^-4", "--out", str(tmp_path / "c")], capsys)
    assert code == 0, err
    summary = json.loads((tmp_path / "c" / "summary.json").read_text())
    assert summary["n"] == 20 and "borel_cantelli" in summary
    code, _, err = _run(["kubilius", "--paths", "200", "--out", str(tmp_path / "k")], capsys)
    assert code == 0, err
    summary = json.loads((tmp_path / "k" / "summary.json").read_text())
    assert 0.0 <= summary["fraction"] <= 1.0
    save = tmp_path / "table.bin"
    code, _, err = _run(["sieve", "--x", "10^4", "--r", "100", "--save", str(save), "--out", str(tmp_path / "s")], capsys)
    assert code == 0, err
    assert json.loads((tmp_path / "s" / "summary.json").read_text())["double_counting_holds"]
    assert save.exists()


def test_compare_uses_cache_and_rebuilds_corrupt_table(tmp_path, capsys):
    cache = tmp_path / "cache"
    argv = ["compare", "--x", "20000", "--paths", "500", "--cache-dir", str(cache)]
    code, _, err = _run(argv + ["--out", str(tmp_path / "a")], capsys)
    assert code == 0, err
    first = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert first["table_rebuilt"] is True
    assert first["policy_ok"] is False
    _run(argv + ["--out", str(tmp_path / "b")], capsys)
    assert json.loads((tmp_path / "b" / "summary.json").read_text())["table_rebuilt"] is False
    (table_file,) = cache.iterdir()
    raw = bytearray(table_file.read_bytes())
    raw[-1] ^= 0x5A
    table_file.write_bytes(bytes(raw))
    _run(argv + ["--out", str(tmp_path / "c")], capsys)
    assert json.loads((tmp_path / "c" / "summary.json").read_text())["table_rebuilt"] is True
    a = (tmp_path / "a" / "compare.csv").read_text()
    assert a == (tmp_path / "c" / "compare.csv").read_text()


def test_cache_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.CACHE_ENV, str(tmp_path / "envcache"))
    code, _, err = _run(["compare", "--x", "10^4", "--paths", "100", "--out", str(tmp_path / "o")], capsys)
    assert code == 0, err
    assert any((tmp_path / "envcache").iterdir())


def _fake_suite(statuses):
    def fake(budget, seed, ids=None, out_dir=None, progress=None):
        results = [CriterionResult(i, f"c{i}", s, "detail", f"a,b\n{i},{s}\n", 0.0) for i, s in enumerate(statuses, 1)]
        for r in results:
            if progress:
                progress(r)
        return results

    return fake


def test_reproduce_failure_exit_1_still_writes_table(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(acceptance, "run_suite", _fake_suite(["pass", "fail", "skipped"]))
    code, out, _ = _run(["reproduce", "--out", str(tmp_path / "r")], capsys)
    assert code == 1
    assert "[FAIL] criterion  2" in out
    table = (tmp_path / "r" / "acceptance.csv").read_text()
    assert "fail" in table and "pass" in table
    assert (tmp_path / "r" / "criterion_03.csv").exists()


def test_reproduce_success_exit_0(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(acceptance, "run_suite", _fake_suite(["pass", "pass"]))
    code, _, _ = _run(["reproduce", "--budget", "full", "--out", str(tmp_path / "r")], capsys)
    assert code == 0

import csv
import json
import logging

import pytest

from nanomind.cli import attention_peak_temp, bench_gemm, compare_reports, main
from nanomind.config import default_scenario_path


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def reports(tmp_path_factory):
    base = tmp_path_factory.mktemp("reports")
    out = {}
    for name, extra in (("modular", []), ("cpu", ["--placement", "monolithic:CPU"]),
                        ("cascade", ["--mode", "cascade"]), ("parallel", ["--mode", "parallel"])):
        d = base / name
        assert main(["run", "--out", str(d), *extra]) == 0
        out[name] = d
    return out


def test_run_writes_both_files(reports):
    d = reports["modular"]
    doc = json.loads((d / "report.json").read_text())
    rows = list(csv.DictReader((d / "report.csv").open()))
    assert len(rows) == len(doc["events"]) + 1 == 4
    assert rows[-1]["row"] == "summary"
    assert [int(t) for t in rows[0]["tokens"].split()] == doc["events"][0]["tokens"]


def test_run_is_byte_identical(reports, tmp_path):
    assert main(["run", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report.json").read_bytes() == (reports["modular"] / "report.json").read_bytes()
    assert (tmp_path / "report.csv").read_bytes() == (reports["modular"] / "report.csv").read_bytes()


def test_monolithic_cpu_plan_section(reports):
    doc = json.loads((reports["cpu"] / "report.json").read_text())
    assert set(doc["plan"]["assignments"].values()) == {"CPU"}
    assert set(doc["plan_bytes"]) == {"CPU"}


def test_compare_identical_is_zero(reports, capsys):
    p = str(reports["modular"] / "report.json")
    code, out, _ = run_cli(["compare", p, p, "--json"], capsys)
    assert code == 0
    rows = json.loads(out)
    assert rows and all(r["abs_delta"] == 0 and r["pct_delta"] == 0 for r in rows)


def test_compare_cascade_vs_parallel_peak(reports, capsys):
    a = json.loads((reports["parallel"] / "report.json").read_text())
    b = json.loads((reports["cascade"] / "report.json").read_text())
    peak = {r["metric"]: r for r in compare_reports(a, b)}["peak_memory_bytes"]
    assert peak["abs_delta"] < 0 and peak["pct_delta"] < 0
    code, out, _ = run_cli(["compare", str(reports["parallel"] / "report.json"),
                            str(reports["cascade"] / "report.json")], capsys)
    assert code == 0 and "peak_memory_bytes" in out


def test_compare_percent_formula():
    a = {"summary": {"x": 4.0, "z": 0.0, "w": 0, "s": "text"}}
    b = {"summary": {"x": 5.0, "z": 1.0, "w": 0, "s": "other"}}
    rows = {r["metric"]: r for r in compare_reports(a, b)}
    assert rows["x"]["pct_delta"] == 0.25 and rows["x"]["abs_delta"] == 1.0
    assert rows["z"]["pct_delta"] is None
    assert rows["w"]["pct_delta"] == 0.0
    assert "s" not in rows


def test_modular_vs_cpu_reduces_energy_and_latency(reports):
    a = json.loads((reports["cpu"] / "report.json").read_text())
    b = json.loads((reports["modular"] / "report.json").read_text())
    rows = {r["metric"]: r for r in compare_reports(a, b)}
    assert rows["energy_j"]["pct_delta"] < 0
    assert rows["e2e_latency_s"]["pct_delta"] < 0


def test_malformed_json_exit_3(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"version": 1,\n "seed": }')
    code, _, err = run_cli(["run", str(p), "--out", str(tmp_path)], capsys)
    assert code == 3 and "bad.json:2:10" in err
    code, _, err = run_cli(["validate-config", str(p)], capsys)
    assert code == 3


def test_infeasible_exit_2(tmp_path, capsys):
    raw = json.loads(default_scenario_path().read_text())
    raw["memory"] = {"capacity_bytes": 10_000_000}
    raw["stages_manifest"] = str(default_scenario_path().parent / "default_stages.json")
    p = tmp_path / "small.json"
    p.write_text(json.dumps(raw))
    code, _, err = run_cli(["run", str(p), "--out", str(tmp_path)], capsys)
    assert code == 2 and "infeasible" in err


def test_validate_config_ok(capsys):
    code, out, _ = run_cli(["validate-config", str(default_scenario_path())], capsys)
    assert code == 0 and "ok" in out and "3 events" in out


def test_figures(tmp_path, capsys):
    code, out, _ = run_cli(["run", "--out", str(tmp_path), "--figures"], capsys)
    assert code == 0
    for name in ("stage_latency.png", "device_timeline.png", "energy_memory.png"):
        data = (tmp_path / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"


def test_bench_gemm_rows_sorted_and_exact():
    rows = bench_gemm([32, 8, 16], [8, 2], repeat=1)
    assert [(r["size"], r["bits"]) for r in rows] == [(8, 2), (8, 8), (16, 2), (16, 8), (32, 2), (32, 8)]
    assert all(r["max_abs_diff"] == 0.0 for r in rows)


def test_bench_attention_flat_in_t():
    peaks = {attention_peak_temp(T, 16)["hook_peak_temp_bytes"] for T in (8, 64, 512)}
    assert len(peaks) == 1


def test_bench_kernels_json(capsys):
    code, out, _ = run_cli(["bench-kernels", "--sizes", "16,8", "--seq-lens", "64,8", "--repeat", "1",
                            "--json"], capsys)
    doc = json.loads(out)
    assert code == 0
    assert [r["size"] for r in doc["gemm"]] == sorted(r["size"] for r in doc["gemm"])
    assert [r["T"] for r in doc["linear_attention"]] == [8, 64]
    code, out, _ = run_cli(["bench-kernels", "--sizes", "8", "--seq-lens", "8", "--repeat", "1"], capsys)
    assert "max_abs_diff" in out


def test_log_env_var(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("NANOMIND_RT_LOG", "DEBUG")
    root = logging.getLogger()
    saved = root.handlers[:], root.level
    root.handlers.clear()
    try:
        assert main(["validate-config", str(default_scenario_path())]) == 0
        assert logging.getLogger().level == logging.DEBUG
    finally:
        root.handlers[:] = saved[0]
        root.setLevel(saved[1])


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    out = capsys.readouterr().out
    assert e.value.code == 0
    for cmd in ("run", "compare", "bench-kernels", "validate-config", "NANOMIND_RT_LOG"):
        assert cmd in out

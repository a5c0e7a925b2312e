"""Command-line front end: ``nanomind run | compare | bench-kernels | validate-config``.

Exit codes: 0 success, 1 unexpected failure, 2 infeasible placement,
3 configuration error. Set ``NANOMIND_RT_LOG`` (e.g. ``DEBUG``) for logs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from . import _alloc, quant
from .config import LOG_ENV, configure_logging, default_scenario_path, load_config
from .errors import ConfigError, InfeasiblePlan
from .linear_attention import attend_causal_batch

log = logging.getLogger("nanomind")

EXIT_OK, EXIT_FAIL, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 1, 2, 3

CSV_COLUMNS = (
    "row", "at", "kind", "exec_mode", "power_mode", "alpha", "input_tokens", "tokens",
    "e2e_latency_s", "load_s", "prefill_s", "decode_s", "tokens_per_s", "peak_memory_bytes",
    "energy_j", "avg_power_w", "recompile_events", "frames_consumed",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(doc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for i, e in enumerate(doc["events"]):
        w.writerow([_fmt(x) for x in (
            i, e["event"]["at"], e["event"]["kind"], e["exec_mode"], e["power_mode"], e["alpha"],
            e["input_tokens"], " ".join(map(str, e["tokens"])), e["e2e_latency_s"], e["load_s"],
            e["prefill_s"], e["decode_s"], e["tokens_per_s"], e["peak_memory_bytes"], e["energy_j"],
            e["avg_power_w"], e["recompile_events"], e["frames_consumed"],
        )])
    s = doc["summary"]
    w.writerow([_fmt(x) for x in (
        "summary", "", "", doc["scenario"]["mode"], "", "", "", s["tokens_generated"],
        s["e2e_latency_s"], s["load_s"], s["prefill_s"], s["decode_s"], s["tokens_per_s"],
        s["peak_memory_bytes"], s["energy_j"], s["avg_power_w"], s["recompile_events"], "",
    )])
    return buf.getvalue()


def dump_report(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- commands


def cmd_run(args) -> int:
    from .pipeline import run_scenario

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    doc = run_scenario(cfg, args.placement, args.mode)
    out = Path(args.out or cfg.output.get("dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dump_report(doc))
    (out / "report.csv").write_text(report_csv(doc))
    print(f"wrote {out / 'report.json'} and {out / 'report.csv'}")
    if args.figures or cfg.output.get("figures"):
        from .plotting import render_figures

        for p in render_figures(doc, out):
            print(f"wrote {p}")
    s = doc["summary"]
    print(f"events={s['events']} e2e={s['e2e_latency_s']:.4f}s tok/s={s['tokens_per_s']:.2f} "
          f"peak={s['peak_memory_bytes']}B energy={s['energy_j']:.4f}J")
    return EXIT_OK


def compare_reports(a: dict, b: dict) -> list[dict]:
    """Per-metric deltas of the numeric summary fields, percent as (b - a) / a."""
    sa, sb = a["summary"], b["summary"]
    rows = []
    for key in sorted(set(sa) | set(sb)):
        va, vb = sa.get(key), sb.get(key)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in (va, vb)):
            continue
        diff = vb - va
        if va != 0:
            pct = diff / va
        else:
            pct = 0.0 if diff == 0 else None
        rows.append({"metric": key, "a": va, "b": vb, "abs_delta": diff, "pct_delta": pct})
    return rows


def _load_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: malformed report JSON: {e.msg}") from e
    except OSError as e:
        raise ConfigError(f"cannot read report {path}: {e.strerror}") from e


def cmd_compare(args) -> int:
    rows = compare_reports(_load_report(args.report_a), _load_report(args.report_b))
    if args.json:
        print(json.dumps(rows, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"{'metric':<22} {'a':>16} {'b':>16} {'abs_delta':>16} {'pct_delta':>10}")
    for r in rows:
        pct = "n/a" if r["pct_delta"] is None else f"{100 * r['pct_delta']:+.2f}%"
        print(f"{r['metric']:<22} {r['a']:>16.6g} {r['b']:>16.6g} {r['abs_delta']:>+16.6g} {pct:>10}")
    return EXIT_OK


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from e


def _best_time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_gemm(sizes, bits_list, group_size=32, repeat=3, seed=0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for n in sorted(sizes):
        x = rng.standard_normal((n, n)).astype(np.float32)
        w = rng.standard_normal((n, n)).astype(np.float32)
        for bits in sorted(bits_list):
            q = quant.quantize_blockwise(w, bits, min(group_size, n))
            fused = quant.gemm_fused_dequant(x, q).data
            ref = quant.gemm_reference(x, q).data
            with _alloc.track_allocations() as al:
                quant.gemm_fused_dequant(x, q)
            rows.append({
                "size": n,
                "bits": bits,
                "fused_s": _best_time(lambda: quant.gemm_fused_dequant(x, q), repeat),
                "reference_s": _best_time(lambda: quant.gemm_reference(x, q), repeat),
                "max_abs_diff": float(np.max(np.abs(fused - ref))),
                "largest_temp_bytes": al.largest,
                "gflops": 2 * n ** 3 / 1e9,
            })
    return rows


def attention_peak_temp(T: int, d: int, seed: int = 0) -> dict:
    """Time and temporary memory of one causal linear-attention pass."""
    rng = np.random.default_rng([seed, T, d])
    Q, K, V = (rng.standard_normal((T, d)) for _ in range(3))
    with _alloc.track_allocations() as al:
        tracemalloc.start()
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        t0 = time.perf_counter()
        out = attend_causal_batch(Q, K, V)
        elapsed = time.perf_counter() - t0
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
    return {
        "T": T,
        "d": d,
        "seconds": elapsed,
        "hook_peak_temp_bytes": al.largest,
        # everything above the output buffer is temporary
        "traced_peak_temp_bytes": max(0, peak - base - out.nbytes),
    }


def cmd_bench_kernels(args) -> int:
    gemm = bench_gemm(args.sizes, args.bits, args.group_size, args.repeat, args.seed)
    attn = [attention_peak_temp(T, args.d, args.seed) for T in sorted(args.seq_lens)]
    if args.json:
        print(json.dumps({"gemm": gemm, "linear_attention": attn}, indent=2, sort_keys=True))
        return EXIT_OK
    print("fused dequant-GEMM vs reference")
    print(f"{'size':>6} {'bits':>4} {'fused_ms':>10} {'ref_ms':>10} {'max_abs_diff':>13} {'tile_bytes':>11}")
    for r in gemm:
        print(f"{r['size']:>6} {r['bits']:>4} {1e3 * r['fused_s']:>10.3f} {1e3 * r['reference_s']:>10.3f} "
              f"{r['max_abs_diff']:>13.3g} {r['largest_temp_bytes']:>11}")
    print("\nlinear attention T-sweep")
    print(f"{'T':>6} {'d':>4} {'ms':>10} {'hook_peak_B':>12} {'traced_peak_B':>14}")
    for r in attn:
        print(f"{r['T']:>6} {r['d']:>4} {1e3 * r['seconds']:>10.3f} {r['hook_peak_temp_bytes']:>12} "
              f"{r['traced_peak_temp_bytes']:>14}")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    cfg = load_config(args.config)
    specs = cfg.build_specs()
    cfg.build_devices()
    cfg.build_power()
    print(f"{args.config}: ok (seed {cfg.seed}, {len(specs)} stages, {len(cfg.trace)} events)")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nanomind",
        description="Simulate modular multimodal inference on a heterogeneous SoC.",
        epilog=f"Exit codes: 0 ok, 1 failure, 2 infeasible placement, 3 config error. "
               f"Log level from ${LOG_ENV}.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write report.json + report.csv")
    r.add_argument("config", nargs="?", default=None,
                   help="scenario JSON (default: the bundled default scenario)")
    r.add_argument("--placement", default=None,
                   help="auto | monolithic:<CPU|GPU|NPU> | file:<plan.json> (overrides the scenario)")
    r.add_argument("--mode", choices=("auto", "parallel", "cascade"), default=None,
                   help="force an execution mode instead of following the power policy")
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    r.add_argument("--out", default=None, help="output directory (default: scenario output.dir or .)")
    r.add_argument("--figures", action="store_true",
                   help="also render PNG figures next to the reports (matplotlib)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="per-metric deltas between two report.json files")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--json", action="store_true", help="machine-readable output")
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("bench-kernels", help="fused GEMM and linear-attention micro-benchmarks")
    b.add_argument("--sizes", type=_int_list, default=[16, 32, 64], help="square GEMM sizes, e.g. 16,32,64")
    b.add_argument("--bits", type=_int_list, default=[2, 4, 8], help="weight bit widths")
    b.add_argument("--group-size", type=int, default=32)
    b.add_argument("--seq-lens", type=_int_list, default=[8, 64, 512], help="attention lengths T")
    b.add_argument("--d", type=int, default=32, help="attention head dim")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bench_kernels)

    v = sub.add_parser("validate-config", help="schema-check a scenario file")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
        if getattr(args, "config", "x") is None:
            args.config = default_scenario_path()
        return args.func(args)
    except InfeasiblePlan as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

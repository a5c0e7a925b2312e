"""Figures rendered from a report document (``report.json`` contents).

Only used by ``nanomind run --figures``; reports themselves are plain data.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

OP_COLORS = {
    "load": "#9e9e9e",
    "execute": "#1f77b4",
    "prefill": "#ff7f0e",
    "decode": "#2ca02c",
    "recompile": "#d62728",
}


def _event_labels(doc: dict) -> list[str]:
    return [f"{e['event']['kind']}@{e['event']['at']:g}s" for e in doc["events"]]


def plot_stage_latency(doc: dict, path: Path) -> Path:
    events = doc["events"]
    labels = _event_labels(doc)
    stages = sorted({s for e in events for s in e["stage_latency_s"]})
    fig, ax = plt.subplots(figsize=(7, 3.5))
    bottom = [0.0] * len(events)
    for stage in stages:
        vals = [e["stage_latency_s"].get(stage, 0.0) for e in events]
        ax.bar(labels, vals, bottom=bottom, label=stage)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_ylabel("simulated busy time (s)")
    ax.set_title("Per-stage latency")
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_device_timeline(doc: dict, path: Path) -> Path:
    rows = sorted({r["device"] for e in doc["events"] for r in e["event_log"] if "device" in r})
    fig, ax = plt.subplots(figsize=(8, 0.6 * len(rows) + 1.5))
    for e in doc["events"]:
        for r in e["event_log"]:
            if "device" not in r or r["end"] <= r["t"]:
                continue
            ax.broken_barh([(r["t"], r["end"] - r["t"])], (rows.index(r["device"]) - 0.4, 0.8),
                           facecolors=OP_COLORS.get(r["op"], "#8c564b"))
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(rows)
    ax.set_xlabel("simulated time (s)")
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in OP_COLORS.values()]
    ax.legend(handles, list(OP_COLORS), fontsize=7, ncol=len(OP_COLORS), loc="upper right")
    ax.set_title("Device activity")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_energy_memory(doc: dict, path: Path) -> Path:
    events = doc["events"]
    labels = _event_labels(doc)
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    a1.bar(labels, [e["energy_j"] for e in events], color="#2ca02c")
    a1.set_ylabel("energy (J)")
    a2.bar(labels, [e["peak_memory_bytes"] / 2**20 for e in events], color="#9467bd")
    a2.set_ylabel("peak resident memory (MiB)")
    for ax in (a1, a2):
        ax.tick_params(axis="x", labelrotation=20, labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_figures(doc: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not doc.get("events"):
        return []
    return [
        plot_stage_latency(doc, out / "stage_latency.png"),
        plot_device_timeline(doc, out / "device_timeline.png"),
        plot_energy_memory(doc, out / "energy_memory.png"),
    ]

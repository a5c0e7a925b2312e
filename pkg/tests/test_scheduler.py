import json

import pytest
from hypothesis import given, strategies as st

from nanomind.devices import DeviceKind, UnifiedMemory, default_profiles
from nanomind.errors import InfeasiblePlan
from nanomind.pipeline import run_scenario
from nanomind.power import PowerManager, PowerMode
from nanomind.scheduler import (
    LayerSplit, PlacementPlan, decide_layer_offload, monolithic_plan, plan_bytes, plan_placement,
    split_bytes, validate_plan,
)
from nanomind.toy_model import make_spec

NPU, GPU, CPU = DeviceKind.NPU, DeviceKind.GPU, DeviceKind.CPU
GiB = 2**30


@pytest.fixture(scope="module")
def specs():
    from nanomind.config import load_default

    return load_default().build_specs()


def decoder_of(specs):
    return next(s for s in specs if s.name == "decoder")


def admission_oracle(plan, specs, devices, capacity):
    """Independent re-check: per-device shares and the shared pool admit the plan."""
    per = {}
    for s in specs:
        kind = plan.assignments[s.name]
        if s.name == "decoder" and kind is GPU:
            g = plan.layer_split.gpu_layers
            gb, cb = split_bytes(s, g)
            per[GPU] = per.get(GPU, 0) + gb
            per[CPU] = per.get(CPU, 0) + cb
        else:
            per[kind] = per.get(kind, 0) + s.cost.weight_bytes
    for kind, b in per.items():
        cap = devices[kind].mem_capacity
        if cap is not None and b > cap:
            return False
    return sum(per.values()) <= capacity


def test_default_plan(specs):
    devices = default_profiles()
    plan = plan_placement(specs, devices, UnifiedMemory(4 * GiB))
    assert plan.assignments == {
        "vision_encoder": NPU, "projector": NPU, "decoder": GPU, "embedding": GPU,
        "audio_stt": CPU, "tts": CPU,
    }
    L = decoder_of(specs).cost.layers
    assert plan.layer_split == LayerSplit(L, 0)
    assert set(plan.rationale.values()) == {"latency"}
    assert validate_plan(plan, specs, devices, UnifiedMemory(4 * GiB)) == []


def test_small_gpu_share_splits_layers(specs):
    devices = default_profiles({"GPU": {"mem_capacity": 60_000_000}})
    plan = plan_placement(specs, devices, UnifiedMemory(4 * GiB))
    split = plan.layer_split
    assert plan.assignments["decoder"] is GPU
    assert 0 < split.gpu_layers < split.cpu_layers
    assert plan.rationale["decoder"] == "memory"
    assert split_bytes(decoder_of(specs), split.gpu_layers)[0] <= 60_000_000
    assert split_bytes(decoder_of(specs), split.gpu_layers + 1)[0] > 60_000_000
    assert admission_oracle(plan, specs, devices, 4 * GiB)
    assert validate_plan(plan, specs, devices) == []


def test_cpu_only(specs):
    devices = {CPU: default_profiles()[CPU]}
    plan = plan_placement(specs, devices, UnifiedMemory(4 * GiB))
    assert set(plan.assignments.values()) == {CPU}
    assert plan.layer_split.gpu_layers == 0


def test_infeasible_lists_constraint(specs):
    devices = default_profiles()
    with pytest.raises(InfeasiblePlan) as e:
        plan_placement(specs, devices, UnifiedMemory(10_000_000))
    assert "needs" in str(e.value) and e.value.constraint


def test_validate_violations(specs):
    devices = default_profiles()
    plan = monolithic_plan(specs, devices, "NPU")
    plan.recompile.clear()
    v = validate_plan(plan, specs, devices)
    assert any("static-graph" in m for m in v)
    full = plan_placement(specs, devices, UnifiedMemory(4 * GiB))
    assert any("unified memory" in m for m in validate_plan(full, specs, devices, UnifiedMemory(GiB // 2)))
    del full.assignments["tts"]
    assert "tts: not assigned" in validate_plan(full, specs, devices)


def test_monolithic_npu_lists_recompiles(specs):
    plan = monolithic_plan(specs, default_profiles(), "NPU")
    assert set(plan.recompile) == {s.name for s in specs if s.dynamic_shape}
    assert validate_plan(plan, specs, default_profiles()) == []


def test_monolithic_staging_overhead(specs):
    plan = monolithic_plan(specs, default_profiles(), "GPU", staging_bytes_per_layer=1000)
    L = decoder_of(specs).cost.layers
    assert plan.staging_bytes == 1000 * L
    assert plan_bytes(plan, specs)[CPU] == 1000 * L


def test_deterministic(specs):
    a = plan_placement(specs, default_profiles(), UnifiedMemory(4 * GiB), PowerMode.THROTTLING, 0.3)
    b = plan_placement(specs, default_profiles(), UnifiedMemory(4 * GiB), PowerMode.THROTTLING, 0.3)
    assert a.to_json() == b.to_json()


def test_plan_json_round_trip(specs, tmp_path):
    plan = plan_placement(specs, default_profiles({"GPU": {"mem_capacity": 60_000_000}}),
                          UnifiedMemory(4 * GiB))
    p = tmp_path / "plan.json"
    p.write_text(plan.to_json())
    again = PlacementPlan.load(p)
    assert again.to_dict() == plan.to_dict()
    assert json.loads(plan.to_json()) == plan.to_dict()


def test_unlimited_full_battery_all_gpu(specs):
    d = decoder_of(specs)
    split = decide_layer_offload(d, default_profiles(), UnifiedMemory(10**15), PowerMode.UNCONSTRAINED)
    assert split == LayerSplit(d.cost.layers, 0)


def test_critical_defers_to_cascade(specs):
    d = decoder_of(specs)
    pm = PowerManager.from_mah(2000, percent=10)
    split = decide_layer_offload(d, default_profiles(), UnifiedMemory(4 * GiB), pm)
    assert split.cascade and split.gpu_layers == 0
    plan = plan_placement(specs, default_profiles(), UnifiedMemory(4 * GiB), PowerMode.CRITICAL)
    assert plan.assignments["decoder"] is CPU and plan.rationale["decoder"] == "battery"


def test_memory_sweep_non_increasing(specs):
    d = decoder_of(specs)
    devices = default_profiles()
    prev = None
    for room in range(d.cost.weight_bytes + 10**6, -1, -20_000_000):
        g = decide_layer_offload(d, devices, UnifiedMemory(4 * GiB), gpu_room=room).gpu_layers
        if prev is not None:
            assert g <= prev
        prev = g
    assert prev == 0


@given(st.integers(0, 700_000_000), st.integers(0, 700_000_000))
def test_more_memory_never_fewer_gpu_layers(a, b):
    d = make_spec("decoder", precision="q4", cost_dims={"dim": 896, "layers": 24, "heads": 14,
                                                         "ffn": 4864, "vocab": 151936})
    lo, hi = sorted((a, b))
    devices = default_profiles()
    mem = UnifiedMemory(4 * GiB)
    assert decide_layer_offload(d, devices, mem, gpu_room=lo).gpu_layers <= \
        decide_layer_offload(d, devices, mem, gpu_room=hi).gpu_layers


@given(st.floats(0, 100), st.floats(0, 100), st.integers(0, 700_000_000))
def test_lower_battery_never_more_gpu_layers(b1, b2, room):
    d = make_spec("decoder", precision="q4", cost_dims={"dim": 896, "layers": 24, "heads": 14,
                                                         "ffn": 4864, "vocab": 151936})
    lo, hi = sorted((b1, b2))
    devices = default_profiles()
    mem = UnifiedMemory(4 * GiB)
    g_lo = decide_layer_offload(d, devices, mem, PowerManager.from_mah(2000, percent=lo), gpu_room=room)
    g_hi = decide_layer_offload(d, devices, mem, PowerManager.from_mah(2000, percent=hi), gpu_room=room)
    assert g_lo.gpu_layers <= g_hi.gpu_layers


@given(st.integers(200_000_000, 4 * GiB), st.one_of(st.none(), st.integers(10_000_000, 2 * GiB)),
       st.sampled_from(list(PowerMode)), st.floats(0, 1))
def test_every_returned_plan_is_valid(capacity, gpu_cap, mode, alpha):
    from nanomind.config import load_default

    specs = load_default().build_specs()
    devices = default_profiles({"GPU": {"mem_capacity": gpu_cap}})
    mem = UnifiedMemory(capacity)
    try:
        plan = plan_placement(specs, devices, mem, mode, alpha)
    except InfeasiblePlan:
        return
    assert validate_plan(plan, specs, devices, mem) == []
    if mode is not PowerMode.CRITICAL:
        assert admission_oracle(plan, specs, devices, capacity)


def test_latency_target_is_soft(specs):
    plan = plan_placement(specs, default_profiles(), UnifiedMemory(4 * GiB), latency_target=1e-6)
    assert plan.warnings and plan.assignments["decoder"] is GPU


def test_modular_beats_every_monolithic_baseline(make_cfg):
    cfg = make_cfg()
    modular = run_scenario(cfg, "auto")["summary"]["e2e_latency_s"]
    for dev in ("CPU", "GPU", "NPU"):
        mono = run_scenario(make_cfg(), f"monolithic:{dev}")["summary"]["e2e_latency_s"]
        assert modular <= mono, dev

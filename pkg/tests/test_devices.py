import pytest
from hypothesis import given, strategies as st

from nanomind.devices import (
    CALIBRATION_TARGET_TOK_S, DeviceKind, DeviceProfile, UnifiedMemory, admit,
    calibration_decoder_spec, check_shape, decode_tokens_per_second, default_profiles,
    estimate_energy, estimate_latency, fit_gpu_bandwidth,
)
from nanomind.errors import ConfigError, OutOfMemory, StaticShapeViolation
from nanomind.toy_model import StageCost, make_spec


def dev(tp=1e9, bw=1e9, **kw):
    return DeviceProfile(kw.pop("kind", DeviceKind.GPU), {"q4": tp, "r16": tp}, bw, 2.0, 0.1, **kw)


def test_admit_release():
    mem = UnifiedMemory(100)
    admit(mem, "a", 60)
    with pytest.raises(OutOfMemory) as e:
        admit(mem, "b", 50)
    assert e.value.available == 40
    mem.release("a")
    admit(mem, "b", 50)
    assert mem.used == 50 and mem.high_water == 60


def test_memory_bound_limit():
    c = StageCost(weight_bytes=0, stream_bytes=4000, act_bytes=0, flops=0)
    assert estimate_latency(dev(), c, precision="q4") == 4000 / 1e9


def test_compute_bound():
    c = StageCost(0, 10, 0, flops=5e9)
    assert estimate_latency(dev(), c, precision="q4") == 5.0


def test_clock_scale_doubles_memory_term():
    c = StageCost(0, 8000, 0, 0)
    mem = UnifiedMemory(1, clock_scale=0.5)
    assert estimate_latency(dev(), c, mem, precision="q4") == 2 * estimate_latency(dev(), c, precision="q4")


def test_unsupported_precision():
    with pytest.raises(ConfigError):
        estimate_latency(dev(), StageCost(0, 1, 0, 1), precision="q8")


@given(st.integers(0, 10**12), st.integers(0, 10**12), st.integers(0, 10**6), st.integers(0, 10**6))
def test_latency_monotone(f1, b1, df, db):
    d = dev()
    a = estimate_latency(d, StageCost(0, b1, 0, f1), precision="q4")
    b = estimate_latency(d, StageCost(0, b1 + db, 0, f1 + df), precision="q4")
    assert b >= a


@given(st.floats(0, 1e4), st.floats(0, 1e4))
def test_energy_monotone(l1, dl):
    d = dev()
    assert estimate_energy(d, l1 + dl) >= estimate_energy(d, l1)


def test_energy_examples():
    d = dev()
    assert estimate_energy(d, 0.0) == 0.0
    assert estimate_energy(d, 3.0) == 6.0
    assert estimate_energy(d, 4.0) == 2 * estimate_energy(d, 2.0)


def test_check_shape():
    profiles = default_profiles()
    v = make_spec("vision_encoder")
    check_shape(profiles[DeviceKind.NPU], v, (64, 64, 3))
    with pytest.raises(StaticShapeViolation) as e:
        check_shape(profiles[DeviceKind.NPU], v, (32, 32, 3))
    assert e.value.recompile_cost == 2.0
    check_shape(profiles[DeviceKind.GPU], v, (7, 9, 3))
    check_shape(profiles[DeviceKind.NPU], v, (32, 32, 3), compiled=(32, 32, 3))


def test_npu_must_be_static():
    with pytest.raises(ConfigError):
        dev(kind=DeviceKind.NPU)


def test_profile_strength_ordering():
    p = default_profiles()
    cpu, gpu, npu = p[DeviceKind.CPU], p[DeviceKind.GPU], p[DeviceKind.NPU]
    for prec in ("q8", "q4"):
        assert npu.throughput[prec] > gpu.throughput[prec] > cpu.throughput[prec]
    assert gpu.throughput["r16"] > npu.throughput["r16"]
    assert npu.supports_dynamic_shapes is False


def test_calibrated_gpu_decode_rate():
    gpu = default_profiles()[DeviceKind.GPU]
    tok_s = decode_tokens_per_second(gpu, calibration_decoder_spec())
    assert tok_s == pytest.approx(CALIBRATION_TARGET_TOK_S, abs=0.5)
    # the shipped bandwidth is the fitted value rounded to 3 significant figures
    assert gpu.mem_bandwidth == pytest.approx(fit_gpu_bandwidth(), rel=5e-3)


def test_profile_overrides():
    p = default_profiles({"GPU": {"active_power": 3.0}})
    assert p[DeviceKind.GPU].active_power == 3.0
    with pytest.raises(ConfigError):
        default_profiles({"TPU": {}})


def test_clock_scale_bounds():
    mem = UnifiedMemory(10)
    with pytest.raises(ValueError):
        mem.set_clock_scale(0)
    mem.set_clock_scale(1.0)

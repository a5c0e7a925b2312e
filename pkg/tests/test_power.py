import pytest
from hypothesis import given, strategies as st

from nanomind.devices import UnifiedMemory
from nanomind.power import (
    PowerManager, PowerMode, RateRange, apply_throttle, estimate_runtime_hours,
    load_battery_trace, mode_for, policy_step, replay_battery_trace, throttle_alpha,
)

from oracles import policy_mode, throttle_alpha as alpha_oracle


def pm_at(percent, **kw):
    return PowerManager.from_mah(2000, 3.9, percent, **kw)


@pytest.mark.parametrize("b,mode,alpha", [
    (80.0, PowerMode.THROTTLING, 1.0),
    (80.0001, PowerMode.UNCONSTRAINED, None),
    (20.0, PowerMode.CRITICAL, None),
    (50.0, PowerMode.THROTTLING, 0.5),
    (100.0, PowerMode.UNCONSTRAINED, None),
    (0.0, PowerMode.CRITICAL, None),
])
def test_policy_boundaries(b, mode, alpha):
    got_mode, got_alpha = policy_step(pm_at(b))
    assert got_mode is mode
    if alpha is None:
        assert got_alpha is None
    else:
        assert got_alpha == pytest.approx(alpha, abs=1e-12)


@given(st.floats(0, 100), st.floats(1, 49), st.floats(51, 99))
def test_policy_matches_oracle(b, lo, hi):
    assert mode_for(b, hi, lo).value == policy_mode(b, hi, lo)
    a = throttle_alpha(b, hi, lo)
    assert 0 <= a <= 1
    if lo < b <= hi:
        assert a == alpha_oracle(b, hi, lo)


def test_alpha_continuity():
    assert throttle_alpha(80 - 1e-9, 80, 20) == pytest.approx(1.0, abs=1e-9)
    assert throttle_alpha(20 + 1e-9, 80, 20) == pytest.approx(0.0, abs=1e-9)


def test_apply_throttle():
    assert apply_throttle(1.0)["camera_fps"] == 30.0
    assert apply_throttle(0.0)["camera_fps"] == 1.0
    assert apply_throttle(0.25)["camera_fps"] == 8.25
    mem = UnifiedMemory(10)
    out = apply_throttle(0.5, {"mem_clock_scale": RateRange(0.25, 1.0)}, mem)
    assert mem.clock_scale == out["mem_clock_scale"] == 0.625
    with pytest.raises(ValueError):
        apply_throttle(1.5)


def test_drain():
    pm = pm_at(100)
    pm.drain(0)
    assert pm.level == 100
    pm.drain(3600)
    assert pm.battery_wh == pytest.approx(7.8 - 1.0)
    pm.drain(pm.capacity_wh * 3600)
    assert pm.level == 0 and pm.mode is PowerMode.CRITICAL
    with pytest.raises(ValueError):
        pm.drain(-1)


def test_mode_change_callbacks():
    pm = pm_at(81)
    seen = []
    pm.on_mode_change(lambda old, new, b: seen.append((old, new)))
    pm.drain(0.02 * 7.8 * 3600)
    pm.drain(0.60 * 7.8 * 3600)
    assert seen == [(PowerMode.UNCONSTRAINED, PowerMode.THROTTLING),
                    (PowerMode.THROTTLING, PowerMode.CRITICAL)]


def test_hysteresis_band():
    pm = pm_at(19, hysteresis=5)
    assert pm.mode is PowerMode.CRITICAL
    pm.set_level(22)
    assert pm.mode is PowerMode.CRITICAL
    pm.set_level(25.5)
    assert pm.mode is PowerMode.THROTTLING
    pm.set_level(20)
    assert pm.mode is PowerMode.CRITICAL
    plain = pm_at(19)
    plain.set_level(22)
    assert plain.mode is PowerMode.THROTTLING


def test_runtime_hours():
    pm = pm_at(100)
    assert pm.capacity_wh == pytest.approx(7.8)
    assert estimate_runtime_hours(pm, 0.375) == pytest.approx(20.8, abs=0.05)
    assert estimate_runtime_hours(PowerManager(7.8), 7.8) == pytest.approx(1.0)
    assert estimate_runtime_hours(pm, 0.1875) == pytest.approx(2 * estimate_runtime_hours(pm, 0.375))
    with pytest.raises(ValueError):
        estimate_runtime_hours(pm, 0)


def test_invalid_thresholds():
    with pytest.raises(ValueError):
        PowerManager(7.8, t_high=20, t_low=80)


def test_battery_trace_replay(tmp_path):
    p = tmp_path / "trace.csv"
    p.write_text("t,B\n0,90\n10,80\n20,50\n30,20\n")
    rows = replay_battery_trace(pm_at(100), load_battery_trace(p))
    assert [r["mode"] for r in rows] == ["Unconstrained", "Throttling", "Throttling", "Critical"]
    assert [r["alpha"] for r in rows] == [None, 1.0, 0.5, None]
    p.write_text("t,B\n5,90\n1,80\n")
    with pytest.raises(ValueError):
        load_battery_trace(p)

"""Battery model and the three-state power policy.

Above ``t_high`` the device runs unconstrained; between ``t_low`` (exclusive)
and ``t_high`` (inclusive) it throttles camera frame rate and memory clock by
``alpha = (B - t_low) / (t_high - t_low)``; at or below ``t_low`` it switches
to event-triggered cascade inference.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .devices import UnifiedMemory


class PowerMode(str, enum.Enum):
    UNCONSTRAINED = "Unconstrained"
    THROTTLING = "Throttling"
    CRITICAL = "Critical"

    def __str__(self):
        return self.value


def mode_for(b: float, t_high: float, t_low: float) -> PowerMode:
    if b > t_high:
        return PowerMode.UNCONSTRAINED
    if b > t_low:
        return PowerMode.THROTTLING
    return PowerMode.CRITICAL


def throttle_alpha(b: float, t_high: float, t_low: float) -> float:
    a = (b - t_low) / (t_high - t_low)
    return min(1.0, max(0.0, a))


@dataclass
class PowerManager:
    capacity_wh: float
    battery_wh: Optional[float] = None
    nominal_voltage: float = 3.9
    t_high: float = 80.0
    t_low: float = 20.0
    # width (percent) of an optional band that must be crossed before leaving a mode
    hysteresis: float = 0.0
    drained_j: list = field(default_factory=list, repr=False)
    _listeners: list = field(default_factory=list, repr=False)
    _mode: Optional[PowerMode] = field(default=None, repr=False)

    def __post_init__(self):
        if self.battery_wh is None:
            self.battery_wh = self.capacity_wh
        if not self.t_low < self.t_high:
            raise ValueError("t_low must be below t_high")
        if not 0 <= self.battery_wh <= self.capacity_wh:
            raise ValueError("battery level outside [0, capacity]")
        self._mode = mode_for(self.level, self.t_high, self.t_low)

    @classmethod
    def from_mah(cls, mah: float, nominal_voltage: float = 3.9, percent: float = 100.0,
                 **kw) -> "PowerManager":
        cap = mah / 1000.0 * nominal_voltage
        return cls(capacity_wh=cap, battery_wh=cap * percent / 100.0,
                   nominal_voltage=nominal_voltage, **kw)

    @property
    def level(self) -> float:
        """Battery level B in percent."""
        return self.battery_wh / self.capacity_wh * 100.0

    @property
    def mode(self) -> PowerMode:
        return self._mode

    @property
    def alpha(self) -> Optional[float]:
        if self._mode is PowerMode.THROTTLING:
            return throttle_alpha(self.level, self.t_high, self.t_low)
        return None

    def on_mode_change(self, fn: Callable[[PowerMode, PowerMode, float], None]) -> None:
        self._listeners.append(fn)

    def _next_mode(self) -> PowerMode:
        b = self.level
        raw = mode_for(b, self.t_high, self.t_low)
        h = self.hysteresis
        if h <= 0 or raw is self._mode:
            return raw
        order = [PowerMode.CRITICAL, PowerMode.THROTTLING, PowerMode.UNCONSTRAINED]
        if order.index(raw) > order.index(self._mode):
            # climbing back up needs the level to clear the threshold by h
            bound = self.t_low if self._mode is PowerMode.CRITICAL else self.t_high
            if b <= bound + h:
                return self._mode
        return raw

    def refresh(self) -> PowerMode:
        new = self._next_mode()
        if new is not self._mode:
            old, self._mode = self._mode, new
            for fn in self._listeners:
                fn(old, new, self.level)
        return self._mode

    def drain(self, joules: float) -> None:
        if joules < 0:
            raise ValueError("cannot drain negative energy")
        self.drained_j.append(joules)
        self.battery_wh = max(0.0, self.battery_wh - joules / 3600.0)
        self.refresh()

    def set_level(self, percent: float) -> None:
        self.battery_wh = self.capacity_wh * percent / 100.0
        self.refresh()

    @property
    def total_drained_j(self) -> float:
        return sum(self.drained_j)


def policy_step(pm: PowerManager) -> tuple[PowerMode, Optional[float]]:
    mode = pm.refresh()
    return mode, pm.alpha


@dataclass(frozen=True)
class RateRange:
    lo: float
    hi: float

    def at(self, alpha: float) -> float:
        return self.lo + alpha * (self.hi - self.lo)


DEFAULT_RATES = {"camera_fps": RateRange(1.0, 30.0), "mem_clock_scale": RateRange(0.25, 1.0)}


def apply_throttle(alpha: float, rates: Optional[dict] = None,
                   mem: Optional[UnifiedMemory] = None) -> dict:
    """Linearly interpolate every rate between its floor and ceiling."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    rates = rates or DEFAULT_RATES
    out = {k: r.at(alpha) for k, r in rates.items()}
    if mem is not None and "mem_clock_scale" in out:
        mem.set_clock_scale(out["mem_clock_scale"])
    return out


def estimate_runtime_hours(pm: PowerManager, avg_power_w: float) -> float:
    if avg_power_w <= 0:
        raise ValueError("average power must be positive")
    return pm.battery_wh / avg_power_w


def load_battery_trace(path) -> list[tuple[float, float]]:
    """Read ``t,B`` rows (seconds, percent) from a CSV file with a header."""
    rows = []
    with Path(path).open(newline="") as f:
        for rec in csv.DictReader(f):
            rows.append((float(rec["t"]), float(rec["B"])))
    if any(b < a for (a, _), (b, _) in zip(rows, rows[1:])):
        raise ValueError("battery trace timestamps must be non-decreasing")
    return rows


def replay_battery_trace(pm: PowerManager, trace) -> list[dict]:
    out = []
    for t, b in trace:
        pm.set_level(b)
        mode, alpha = policy_step(pm)
        out.append({"t": t, "B": b, "mode": mode.value, "alpha": alpha})
    return out

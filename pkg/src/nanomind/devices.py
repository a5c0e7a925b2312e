"""Simulated heterogeneous accelerators sharing one unified DRAM.

Numerics always run on the host; a :class:`DeviceProfile` only decides what a
stage *costs* (roofline latency, energy) and whether it is *legal* (supported
precision, static-shape constraint).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .errors import ConfigError, OutOfMemory, StaticShapeViolation
from .toy_model import StageCost, StageSpec

DEFAULT_RECOMPILE_COST = 2.0


class DeviceKind(str, enum.Enum):
    CPU = "CPU"
    GPU = "GPU"
    NPU = "NPU"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class DeviceProfile:
    kind: DeviceKind
    throughput: Mapping[str, float]  # precision -> ops/second
    mem_bandwidth: float  # bytes/second at clock_scale 1
    active_power: float  # watts
    idle_power: float  # watts
    supports_dynamic_shapes: bool = True
    mem_capacity: Optional[int] = None  # per-device share of unified memory; None = unbounded
    recompile_cost: float = DEFAULT_RECOMPILE_COST

    def __post_init__(self):
        object.__setattr__(self, "kind", DeviceKind(self.kind))
        object.__setattr__(self, "throughput", dict(self.throughput))
        if any(v <= 0 for v in self.throughput.values()):
            raise ConfigError(f"{self.kind}: throughput must be positive")
        if self.mem_bandwidth <= 0:
            raise ConfigError(f"{self.kind}: mem_bandwidth must be positive")
        if self.kind is DeviceKind.NPU and self.supports_dynamic_shapes:
            raise ConfigError("NPU profiles must set supports_dynamic_shapes = false")

    @property
    def supported_precisions(self) -> frozenset:
        return frozenset(self.throughput)

    def to_dict(self) -> dict:
        return {
            "throughput": dict(sorted(self.throughput.items())),
            "mem_bandwidth": self.mem_bandwidth,
            "active_power": self.active_power,
            "idle_power": self.idle_power,
            "supports_dynamic_shapes": self.supports_dynamic_shapes,
            "mem_capacity": self.mem_capacity,
            "recompile_cost": self.recompile_cost,
        }

    @classmethod
    def from_dict(cls, kind, d: Mapping) -> "DeviceProfile":
        return cls(kind=DeviceKind(kind), **d)


@dataclass
class UnifiedMemory:
    """One DRAM pool shared by every device; ``clock_scale`` throttles bandwidth for all."""

    capacity_bytes: int
    residents: dict = field(default_factory=dict)
    clock_scale: float = 1.0
    high_water: int = 0

    @property
    def used(self) -> int:
        return sum(self.residents.values())

    @property
    def free(self) -> int:
        return self.capacity_bytes - self.used

    def admit(self, owner: str, nbytes: int) -> None:
        if owner in self.residents:
            raise ValueError(f"{owner!r} is already resident")
        if nbytes > self.free:
            raise OutOfMemory(owner, nbytes, self.free)
        self.residents[owner] = int(nbytes)
        self.high_water = max(self.high_water, self.used)

    def release(self, owner: str) -> int:
        return self.residents.pop(owner)

    def reset_high_water(self) -> None:
        self.high_water = self.used

    def set_clock_scale(self, scale: float) -> None:
        if not 0 < scale <= 1:
            raise ValueError(f"clock_scale must be in (0, 1], got {scale}")
        self.clock_scale = float(scale)


def admit(mem: UnifiedMemory, owner: str, nbytes: int) -> None:
    mem.admit(owner, nbytes)


def _cost_of(stage) -> StageCost:
    return stage.cost if isinstance(stage, StageSpec) else stage


def estimate_latency(dev: DeviceProfile, stage, mem: Optional[UnifiedMemory] = None,
                     calls: int = 1, precision: Optional[str] = None) -> float:
    """Roofline latency: the slower of the compute and memory terms.

    ``stage`` is a :class:`StageSpec` or a bare :class:`StageCost` (then
    ``precision`` is required). ``calls`` batches several inputs through one
    pass over the weights, as in prefill.
    """
    if isinstance(stage, StageSpec):
        precision = precision or stage.precision
    if precision not in dev.throughput:
        raise ConfigError(f"{dev.kind} does not support precision {precision!r}")
    cost = _cost_of(stage)
    scale = mem.clock_scale if mem is not None else 1.0
    compute = cost.flops * calls / dev.throughput[precision]
    memory = cost.bytes_moved(calls) / (dev.mem_bandwidth * scale)
    return max(compute, memory)


def estimate_energy(dev: DeviceProfile, latency: float) -> float:
    return dev.active_power * latency


def check_shape(dev: DeviceProfile, stage: StageSpec, dims, compiled=None) -> None:
    """Raise :class:`StaticShapeViolation` when a static-graph device sees new dims.

    ``compiled`` overrides the shape the device was compiled for (after a
    recompile); it defaults to the stage's declared input shape.
    """
    if dev.supports_dynamic_shapes:
        return
    expected = tuple(compiled if compiled is not None else stage.input_shape)
    got = tuple(dims)
    if got != expected:
        raise StaticShapeViolation(
            f"{dev.kind} compiled {stage.name} for {expected}, got {got}",
            recompile_cost=dev.recompile_cost, expected=expected, got=got,
        )


# Profiles loosely sized after a low-end SoC (quad A55, small Mali GPU, ~1 TOPS NPU).
# GPU memory bandwidth is fitted so the calibration decoder decodes at 35.7 tok/s;
# see calibration_decoder_spec().
DEFAULT_PROFILES = {
    "CPU": {
        "throughput": {"r16": 12e9, "q8": 16e9, "q4": 14e9, "q2": 12e9},
        "mem_bandwidth": 6.0e9,
        "active_power": 1.5,
        "idle_power": 0.3,
        "supports_dynamic_shapes": True,
    },
    "GPU": {
        "throughput": {"r16": 76e9, "q8": 50e9, "q4": 50e9, "q2": 50e9},
        "mem_bandwidth": 12.4e9,
        "active_power": 1.8,
        "idle_power": 0.15,
        "supports_dynamic_shapes": True,
    },
    "NPU": {
        "throughput": {"r16": 40e9, "q8": 800e9, "q4": 1000e9},
        "mem_bandwidth": 8.0e9,
        "active_power": 0.9,
        "idle_power": 0.05,
        "supports_dynamic_shapes": False,
        "recompile_cost": DEFAULT_RECOMPILE_COST,
    },
}

CALIBRATION_TARGET_TOK_S = 35.7

# Decoder dims of the 0.5B-class language model the toy decoder mirrors.
CALIBRATION_DECODER_DIMS = {"dim": 896, "layers": 24, "heads": 14, "ffn": 4864, "vocab": 151936}


def default_profiles(overrides: Optional[Mapping] = None) -> dict:
    """Default CPU/GPU/NPU profiles keyed by kind, optionally overridden per key."""
    overrides = overrides or {}
    out = {}
    for kind, base in DEFAULT_PROFILES.items():
        merged = {**base, **overrides.get(kind, {})}
        out[DeviceKind(kind)] = DeviceProfile.from_dict(kind, merged)
    for kind in overrides:
        if kind not in DEFAULT_PROFILES:
            raise ConfigError(f"unknown device kind {kind!r}")
    return out


def calibration_decoder_spec() -> StageSpec:
    from .toy_model import make_spec

    return make_spec("decoder", precision="q4", cost_dims=CALIBRATION_DECODER_DIMS)


def fit_gpu_bandwidth(target_tok_s: float = CALIBRATION_TARGET_TOK_S) -> float:
    """Bandwidth at which one calibration decode step takes 1/target seconds."""
    cost = calibration_decoder_spec().cost
    return cost.bytes_moved(1) * target_tok_s


def decode_tokens_per_second(dev: DeviceProfile, spec: StageSpec,
                             mem: Optional[UnifiedMemory] = None) -> float:
    return 1.0 / estimate_latency(dev, spec, mem)

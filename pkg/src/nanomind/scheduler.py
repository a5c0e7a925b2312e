"""Module-level offloading: which device runs which stage, and how the
decoder's layers are split between GPU and CPU.

Happy path in performance mode: vision encoder and projector on the NPU,
decoder and token embedding on the GPU, speech stubs on the CPU. When a
device cannot admit a stage the next device in its fallback list is tried;
the decoder can instead be split layer-wise between GPU and CPU.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .devices import DeviceKind, DeviceProfile, UnifiedMemory, estimate_latency
from .errors import ConfigError, InfeasiblePlan
from .power import PowerMode
from .toy_model import StageSpec

log = logging.getLogger(__name__)

NPU, GPU, CPU = DeviceKind.NPU, DeviceKind.GPU, DeviceKind.CPU

FALLBACK = {
    "vision_encoder": (NPU, GPU, CPU),
    "projector": (NPU, GPU, CPU),
    "decoder": (GPU, CPU),
    "embedding": (GPU, CPU),
    "audio_stt": (CPU,),
    "tts": (CPU,),
}
# the decoder claims GPU memory before the small stages do
PLANNING_ORDER = ("vision_encoder", "projector", "decoder", "embedding", "audio_stt", "tts")


@dataclass(frozen=True)
class LayerSplit:
    gpu_layers: int
    cpu_layers: int
    cascade: bool = False

    @property
    def total(self) -> int:
        return self.gpu_layers + self.cpu_layers


@dataclass
class PlacementPlan:
    assignments: dict  # stage name -> DeviceKind
    layer_split: Optional[LayerSplit] = None
    rationale: dict = field(default_factory=dict)  # stage name -> latency | memory | battery
    recompile: list = field(default_factory=list)  # stages accepted on a static-shape device
    warnings: list = field(default_factory=list)
    staging_bytes: int = 0

    def device_for(self, stage: str) -> DeviceKind:
        return self.assignments[stage]

    def to_dict(self) -> dict:
        split = None
        if self.layer_split is not None:
            split = {"gpu_layers": self.layer_split.gpu_layers,
                     "cpu_layers": self.layer_split.cpu_layers,
                     "cascade": self.layer_split.cascade}
        return {
            "assignments": {k: str(v) for k, v in sorted(self.assignments.items())},
            "layer_split": split,
            "rationale": dict(sorted(self.rationale.items())),
            "recompile": sorted(self.recompile),
            "warnings": list(self.warnings),
            "staging_bytes": self.staging_bytes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlacementPlan":
        try:
            split = d.get("layer_split")
            return cls(
                assignments={k: DeviceKind(v) for k, v in d["assignments"].items()},
                layer_split=LayerSplit(**split) if split else None,
                rationale=dict(d.get("rationale", {})),
                recompile=list(d.get("recompile", [])),
                warnings=list(d.get("warnings", [])),
                staging_bytes=int(d.get("staging_bytes", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid placement plan: {e}") from e

    @classmethod
    def load(cls, path) -> "PlacementPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _supports(dev: DeviceProfile, spec: StageSpec) -> bool:
    if spec.precision not in dev.supported_precisions:
        return False
    return dev.supports_dynamic_shapes or not spec.dynamic_shape


class _Budget:
    """Remaining bytes per device share and in the shared pool during planning."""

    def __init__(self, devices: Mapping, mem: UnifiedMemory, reserved: int):
        self.pool = mem.free - reserved
        self.per_device = {k: (d.mem_capacity if d.mem_capacity is not None else float("inf"))
                           for k, d in devices.items()}

    def room(self, kind) -> float:
        return min(self.pool, self.per_device[kind])

    def take(self, kind, nbytes: int) -> None:
        self.pool -= nbytes
        self.per_device[kind] -= nbytes


def _split_latency(decoder: StageSpec, devices, mem, g: int) -> tuple[float, float]:
    """Per-token (GPU, CPU) busy seconds with ``g`` layers on the GPU."""
    L = decoder.cost.layers
    t_gpu = t_cpu = 0.0
    if g:
        t_gpu = estimate_latency(devices[GPU], decoder.cost.subset(g, g == L), mem,
                                 precision=decoder.precision)
    if g < L:
        t_cpu = estimate_latency(devices[CPU], decoder.cost.subset(L - g, True), mem,
                                 precision=decoder.precision)
    return t_gpu, t_cpu


def _split_power(decoder, devices, mem, g: int) -> float:
    t_gpu, t_cpu = _split_latency(decoder, devices, mem, g)
    e = devices[GPU].active_power * t_gpu + devices[CPU].active_power * t_cpu
    return e / (t_gpu + t_cpu)


def split_bytes(decoder: StageSpec, g: int) -> tuple[int, int]:
    """(GPU bytes, CPU bytes) of decoder weights with ``g`` layers on the GPU.

    The head and embedding table follow the last layer, so they move to the
    GPU only once every layer is there.
    """
    L = decoder.cost.layers
    on_gpu = decoder.cost.subset(g, g == L).weight_bytes if g else 0
    return on_gpu, decoder.cost.weight_bytes - on_gpu


def decide_layer_offload(decoder: StageSpec, devices: Mapping, mem: UnifiedMemory,
                         battery=PowerMode.UNCONSTRAINED, latency_target: Optional[float] = None,
                         gpu_room: Optional[float] = None, alpha: Optional[float] = None,
                         warnings: Optional[list] = None) -> LayerSplit:
    """Largest GPU layer count that fits in memory and in the battery's power budget.

    ``battery`` is a :class:`PowerMode` (with ``alpha`` for Throttling) or a
    :class:`~nanomind.power.PowerManager`. In Throttling mode the allowed
    average power is interpolated by alpha between the all-CPU and the
    most power-hungry split. In Critical mode the decoder is handed to the
    cascade executor and no layers stay GPU-resident.
    """
    if hasattr(battery, "mode"):
        battery, alpha = battery.mode, battery.alpha
    L = decoder.cost.layers
    if battery is PowerMode.CRITICAL:
        return LayerSplit(0, L, cascade=True)
    if GPU not in devices or decoder.precision not in devices[GPU].supported_precisions:
        return LayerSplit(0, L)
    if gpu_room is None:
        cap = devices[GPU].mem_capacity
        gpu_room = min(mem.free, cap if cap is not None else float("inf"))
    feasible = [g for g in range(L + 1) if split_bytes(decoder, g)[0] <= gpu_room]
    if battery is PowerMode.THROTTLING and CPU in devices:
        a = 1.0 if alpha is None else alpha
        powers = {g: _split_power(decoder, devices, mem, g) for g in range(L + 1)}
        budget = powers[0] + a * (max(powers.values()) - powers[0])
        feasible = [g for g in feasible if powers[g] <= budget]
    g = max(feasible) if feasible else 0
    if CPU not in devices and g < L:
        raise InfeasiblePlan("decoder does not fit on the GPU and no CPU is available", "memory")
    if latency_target is not None:
        lat = sum(_split_latency(decoder, devices, mem, g))
        if lat > latency_target and warnings is not None:
            warnings.append(f"decoder step {lat:.4f}s exceeds latency target {latency_target:.4f}s")
    return LayerSplit(g, L - g)


def plan_placement(stages: Sequence[StageSpec], devices: Mapping, mem: UnifiedMemory,
                   power_mode=PowerMode.UNCONSTRAINED, alpha: Optional[float] = None,
                   latency_target: Optional[float] = None, reserved_bytes: int = 0) -> PlacementPlan:
    """Assign each stage to its preferred feasible device.

    ``reserved_bytes`` is held back for buffers that are not stage weights
    (the ring-buffer arena). In Critical mode stages never co-reside, so each
    only has to fit on its own.
    """
    by_name = {s.name: s for s in stages}
    cascade = power_mode is PowerMode.CRITICAL
    budget = _Budget(devices, mem, reserved_bytes)
    plan = PlacementPlan(assignments={})
    for name in sorted(by_name, key=PLANNING_ORDER.index):
        spec = by_name[name]
        need = spec.cost.weight_bytes
        chosen = None
        tried = []
        mem_rejected = power_rejected = False
        for kind in FALLBACK[name]:
            dev = devices.get(kind)
            if dev is None or not _supports(dev, spec):
                continue
            room = budget.room(kind) if not cascade else min(
                mem.free, dev.mem_capacity if dev.mem_capacity is not None else float("inf"))
            if name == "decoder" and kind is GPU:
                split = decide_layer_offload(spec, devices, mem, power_mode, latency_target,
                                             gpu_room=room, alpha=alpha, warnings=plan.warnings)
                if split.cascade:
                    # no GPU-resident layers: the cascade runs the decoder on the CPU
                    cpu = devices.get(CPU)
                    target = CPU if cpu is not None and _supports(cpu, spec) else kind
                    cap = devices[target].mem_capacity
                    if need > min(mem.free, cap if cap is not None else float("inf")):
                        tried.append(f"{target}: needs {need} bytes even when resident alone")
                        mem_rejected = True
                        break
                    chosen = target
                    plan.layer_split = split
                    plan.rationale[name] = "battery"
                    break
                full_fits = split_bytes(spec, spec.cost.layers)[0] <= room
                if split.gpu_layers == 0:
                    tried.append(f"{kind}: no decoder layer fits or power budget exhausted")
                    mem_rejected = mem_rejected or not full_fits
                    power_rejected = full_fits
                    continue
                gpu_b, cpu_b = split_bytes(spec, split.gpu_layers)
                if cpu_b > budget.room(CPU):
                    tried.append(f"{kind}: CPU share of the layer split does not fit")
                    mem_rejected = True
                    continue
                budget.take(GPU, gpu_b)
                if cpu_b:
                    budget.take(CPU, cpu_b)
                chosen, plan.layer_split = kind, split
                if split.cpu_layers == 0:
                    plan.rationale[name] = "latency"
                else:
                    plan.rationale[name] = "memory" if not full_fits else "battery"
                break
            if need > room:
                tried.append(f"{kind}: needs {need} bytes, {int(room)} available")
                mem_rejected = True
                continue
            if not cascade:
                budget.take(kind, need)
            chosen = kind
            plan.rationale[name] = ("memory" if mem_rejected else
                                    "battery" if power_rejected else "latency")
            if name == "decoder":
                plan.layer_split = LayerSplit(0, spec.cost.layers, cascade=cascade)
            break
        if chosen is None:
            detail = "; ".join(tried) or "no device supports its precision/shape"
            raise InfeasiblePlan(f"no feasible device for {name}: {detail}", constraint=detail)
        plan.assignments[name] = chosen
    log.debug("placement %s", plan.to_dict())
    return plan


def monolithic_plan(stages: Sequence[StageSpec], devices: Mapping, kind,
                    staging_bytes_per_layer: int = 0) -> PlacementPlan:
    """Every stage on one device, the single-accelerator baseline.

    ``staging_bytes_per_layer`` models the extra host-side buffers a
    layer-offloading framework keeps per GPU layer; it defaults to zero.
    """
    kind = DeviceKind(kind)
    if kind not in devices:
        raise InfeasiblePlan(f"device {kind} is not configured", constraint="device")
    dev = devices[kind]
    plan = PlacementPlan(assignments={})
    for spec in stages:
        if spec.precision not in dev.supported_precisions:
            raise InfeasiblePlan(f"{kind} does not support {spec.name} precision {spec.precision}",
                                 constraint="precision")
        plan.assignments[spec.name] = kind
        plan.rationale[spec.name] = "latency"
        if spec.dynamic_shape and not dev.supports_dynamic_shapes:
            plan.recompile.append(spec.name)
        if spec.name == "decoder":
            L = spec.cost.layers
            plan.layer_split = LayerSplit(L, 0) if kind is GPU else LayerSplit(0, L)
            if kind is GPU:
                plan.staging_bytes = staging_bytes_per_layer * L
    return plan


def plan_bytes(plan: PlacementPlan, stages: Sequence[StageSpec]) -> dict:
    """Resident weight bytes per device implied by ``plan``."""
    out: dict = {}
    for spec in stages:
        kind = plan.assignments.get(spec.name)
        if kind is None:
            continue
        if spec.name == "decoder" and plan.layer_split is not None and kind is GPU \
                and not plan.layer_split.cascade:
            gpu_b, cpu_b = split_bytes(spec, plan.layer_split.gpu_layers)
            out[GPU] = out.get(GPU, 0) + gpu_b
            if cpu_b:
                out[CPU] = out.get(CPU, 0) + cpu_b
        else:
            out[kind] = out.get(kind, 0) + spec.cost.weight_bytes
    if plan.staging_bytes:
        out[CPU] = out.get(CPU, 0) + plan.staging_bytes
    return out


def validate_plan(plan: PlacementPlan, stages: Sequence[StageSpec], devices: Mapping,
                  mem: Optional[UnifiedMemory] = None, reserved_bytes: int = 0) -> list[str]:
    """Every violated constraint as a message; an empty list means the plan is valid."""
    violations = []
    for spec in stages:
        kind = plan.assignments.get(spec.name)
        if kind is None:
            violations.append(f"{spec.name}: not assigned")
            continue
        dev = devices.get(kind)
        if dev is None:
            violations.append(f"{spec.name}: assigned to missing device {kind}")
            continue
        if spec.precision not in dev.supported_precisions:
            violations.append(f"{spec.name}: {kind} does not support {spec.precision}")
        if spec.dynamic_shape and not dev.supports_dynamic_shapes and spec.name not in plan.recompile:
            violations.append(f"{spec.name}: dynamic shapes on static-graph {kind} without recompile")
        if spec.name == "decoder" and plan.layer_split is not None:
            if plan.layer_split.total != spec.cost.layers:
                violations.append(
                    f"decoder: layer split {plan.layer_split.total} != {spec.cost.layers} layers"
                )
    cascade = plan.layer_split is not None and plan.layer_split.cascade
    per_dev = plan_bytes(plan, stages)
    for kind, nbytes in per_dev.items():
        dev = devices.get(kind)
        if dev is not None and dev.mem_capacity is not None and not cascade and nbytes > dev.mem_capacity:
            violations.append(f"{kind}: {nbytes} bytes exceed device share {dev.mem_capacity}")
    if mem is not None:
        total = (max((s.cost.weight_bytes for s in stages), default=0) if cascade
                 else sum(per_dev.values())) + reserved_bytes
        if total > mem.capacity_bytes:
            violations.append(f"unified memory: {total} bytes exceed capacity {mem.capacity_bytes}")
    return violations

"""Execution engine: parallel streaming and event-triggered cascade inference.

Numerics always run on the host through the toy stages. Time, energy and
memory are simulated from the device profiles and stage cost descriptions,
so reports are a deterministic function of the scenario and seed; wall-clock
time never enters them.

Parallel mode keeps every stage resident and streams the encoder output into
the decoder through a ring-buffer pool, a producer and a consumer thread on
either side. Cascade mode runs one stage at a time (load, execute, release)
and hands only the stage output to the next one.
"""

from __future__ import annotations

import logging
import threading
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .config import Event, ScenarioConfig
from .devices import DeviceKind, UnifiedMemory, estimate_latency
from .errors import ConfigError, InfeasiblePlan, OutOfMemory, StaticShapeViolation
from .power import PowerMode, apply_throttle, policy_step
from .scheduler import (
    PlacementPlan, monolithic_plan, plan_bytes, plan_placement, validate_plan,
)
from .tabm import RingBufferPool
from .toy_model import BatchHeader, EmbeddingBatch, build_stage

log = logging.getLogger(__name__)

CPU, GPU = DeviceKind.CPU, DeviceKind.GPU

CHAINS = {
    "camera_frame": ("vision_encoder", "projector", "embedding", "decoder", "tts"),
    "wake_word": ("audio_stt", "embedding", "decoder", "tts"),
    "text_prompt": ("embedding", "decoder", "tts"),
}
DEFAULT_PROMPT = "Describe the scene."
READ_TIMEOUT_S = 60.0


@dataclass
class RunReport:
    event: dict
    exec_mode: str
    power_mode: str
    alpha: Optional[float]
    rates: dict
    plan: dict
    stage_latency_s: dict
    load_s: float
    prefill_s: float
    decode_s: float
    e2e_latency_s: float
    tokens_per_s: float
    input_tokens: int
    tokens: list
    audio_samples: int
    frames_consumed: int
    peak_memory_bytes: int
    arena_bytes: int
    energy_j: float
    avg_power_w: float
    device_busy_s: dict
    recompile_events: int
    started_at: float
    event_log: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EventLoopResult:
    reports: list
    idle_energy_j: float
    total_energy_j: float
    end_time: float
    timeline: list

    @property
    def energy_j(self) -> float:
        return self.total_energy_j


class _Clock:
    """Per-device availability on the simulated clock."""

    def __init__(self, t0: float):
        self.t0 = t0
        self.free: dict = defaultdict(lambda: t0)
        self.busy: Counter = Counter()
        self.stage_time: Counter = Counter()
        self.log: list = []
        self.end = t0

    def run(self, device, stage: str, op: str, ready: float, duration: float, **extra) -> float:
        start = max(ready, self.free[device])
        end = start + duration
        self.free[device] = end
        self.busy[device] += duration
        if op != "load":
            self.stage_time[stage] += duration
        self.end = max(self.end, end)
        self.log.append({"t": start, "end": end, "op": op, "stage": stage, "device": str(device), **extra})
        return end

    def mark(self, t: float, op: str, stage: str, **extra) -> None:
        self.log.append({"t": t, "end": t, "op": op, "stage": stage, **extra})


def prompt_tokens(text: str, vocab: int) -> list[int]:
    """Prompts are tokenized as their UTF-8 bytes."""
    return [b % vocab for b in text.encode("utf-8")]


def synth_image(seed: int, image_seed: int, frame: int, shape) -> np.ndarray:
    rng = np.random.default_rng([int(seed), int(image_seed), int(frame)])
    return rng.integers(0, 256, size=tuple(shape), dtype=np.uint8)


def synth_audio(tokens, tts) -> np.ndarray:
    """Microphone input rendered with the speech-synthesis stub's encoding."""
    return tts.run(list(tokens)[: tts.spec.dims["frames"]])


class Runtime:
    """Owns the stages, unified memory, battery, and the simulated clock.

    ``placement`` is ``auto``, ``monolithic:<DEV>`` or ``file:<path>``;
    ``mode`` forces ``parallel`` or ``cascade`` instead of following the
    power policy.
    """

    def __init__(self, cfg: ScenarioConfig, placement: Optional[str] = None,
                 mode: Optional[str] = None):
        self.cfg = cfg
        self.seed = cfg.seed
        self.specs = {s.name: s for s in cfg.build_specs()}
        self.devices = cfg.build_devices()
        self.mem: UnifiedMemory = cfg.build_memory()
        self.pm = cfg.build_power()
        self.rates = cfg.build_rates()
        self.storage_bw = float(cfg.memory["storage_bandwidth"])
        self.placement = placement or cfg.placement
        self.mode = mode or cfg.pipeline["mode"]
        if self.mode not in ("auto", "parallel", "cascade"):
            raise ConfigError(f"unknown execution mode {self.mode!r}")
        p = cfg.pipeline
        self.tokens_per_batch = int(p["tokens_per_batch"])
        self.n_slots = int(p["n_slots"])
        self.new_tokens = int(p["new_tokens"])
        self.latency_target = p["latency_target"]
        self.staging_per_layer = int(p["staging_bytes_per_layer"])
        self.stages = {name: build_stage(spec, self.seed) for name, spec in self.specs.items()}
        dim = self.specs["decoder"].dims["dim"]
        self.pool = RingBufferPool(self.n_slots, 2 * self.tokens_per_batch * dim)
        self.clock = 0.0
        self.resident_plan: Optional[dict] = None
        self.compiled: dict = {}
        self.timeline: list = []
        self.pm.on_mode_change(self._on_mode_change)

    def _on_mode_change(self, old, new, level) -> None:
        self.timeline.append({"t": self.clock, "from": str(old), "to": str(new), "B": level})

    # ---------------------------------------------------------------- planning

    def make_plan(self, power_mode=PowerMode.UNCONSTRAINED, alpha=None,
                  placement: Optional[str] = None) -> PlacementPlan:
        placement = placement or self.placement
        specs = list(self.specs.values())
        fresh = UnifiedMemory(self.mem.capacity_bytes, clock_scale=self.mem.clock_scale)
        reserved = 0 if power_mode is PowerMode.CRITICAL else self.pool.arena_bytes
        if placement == "auto":
            plan = plan_placement(specs, self.devices, fresh, power_mode, alpha,
                                  self.latency_target, reserved_bytes=reserved)
        elif placement.startswith("monolithic:"):
            plan = monolithic_plan(specs, self.devices, placement.split(":", 1)[1],
                                   self.staging_per_layer)
        elif placement.startswith("file:"):
            plan = PlacementPlan.load(self.cfg.base_dir / placement.split(":", 1)[1])
        else:
            raise ConfigError(f"unknown placement {placement!r}")
        violations = validate_plan(plan, specs, self.devices, fresh, reserved)
        if violations:
            raise InfeasiblePlan("placement is infeasible: " + "; ".join(violations),
                                 constraint=violations[0])
        return plan

    # ------------------------------------------------------------------ costs

    def _segments(self, plan: PlacementPlan, name: str, calls: int, cost=None) -> list:
        """(device, seconds) pieces of one call of a stage under ``plan``."""
        spec = self.specs[name]
        kind = plan.assignments[name]
        if cost is not None:
            return [(kind, estimate_latency(self.devices[kind], cost, self.mem, calls, spec.precision))]
        split = plan.layer_split
        if name == "decoder" and split is not None and kind is GPU and not split.cascade \
                and split.cpu_layers:
            L, g = spec.cost.layers, split.gpu_layers
            out = []
            if g:
                out.append((GPU, estimate_latency(self.devices[GPU], spec.cost.subset(g, False),
                                                  self.mem, calls, spec.precision)))
            out.append((CPU, estimate_latency(self.devices[CPU], spec.cost.subset(L - g, True),
                                              self.mem, calls, spec.precision)))
            return out
        return [(kind, estimate_latency(self.devices[kind], spec, self.mem, calls))]

    def _exec(self, clk: _Clock, plan: PlacementPlan, name: str, ready: float, dims,
              calls: int = 1, op: str = "execute", cost=None) -> float:
        kind = plan.assignments[name]
        dev = self.devices[kind]
        spec = self.specs[name]
        dims = tuple(dims)
        if not dev.supports_dynamic_shapes:
            compiled = self.compiled.get(name, tuple(spec.input_shape))
            if compiled != dims:
                if name not in plan.recompile:
                    raise StaticShapeViolation(
                        f"{dev.kind} compiled {name} for {compiled}, got {dims}",
                        recompile_cost=dev.recompile_cost, expected=compiled, got=dims)
                ready = clk.run(kind, name, "recompile", ready, dev.recompile_cost, dims=list(dims))
                self.compiled[name] = dims
        t = ready
        for kind_i, seconds in self._segments(plan, name, calls, cost):
            t = clk.run(kind_i, name, op, t, seconds, calls=calls)
        return t

    def _load(self, clk: _Clock, name: str, ready: float, nbytes: int) -> float:
        return clk.run(CPU, name, "load", ready, nbytes / self.storage_bw, bytes=nbytes)

    def _energy(self, clk: _Clock, devices, span: float, idle_all: bool) -> float:
        e = 0.0
        for kind in sorted(devices, key=str):
            dev = self.devices[kind]
            busy = clk.busy.get(kind, 0.0)
            e += dev.active_power * busy
            if idle_all or kind is CPU:
                e += dev.idle_power * max(0.0, span - busy)
        return e

    # -------------------------------------------------------------- residency

    def release_all(self) -> None:
        for owner in list(self.mem.residents):
            self.mem.release(owner)
        self.resident_plan = None
        self.compiled.clear()

    def _make_resident(self, clk: _Clock, plan: PlacementPlan) -> float:
        """Admit every stage of ``plan`` plus the pool arena; returns when loading ends."""
        key = plan.to_dict()
        if self.resident_plan == key:
            return clk.t0
        self.release_all()
        t = clk.t0
        for name in self.specs:
            nbytes = self.specs[name].cost.weight_bytes
            self.mem.admit(name, nbytes)
            clk.mark(t, "admit", name, bytes=nbytes)
            t = self._load(clk, name, t, nbytes)
        if plan.staging_bytes:
            self.mem.admit("staging", plan.staging_bytes)
        self.mem.admit("tabm_arena", self.pool.arena_bytes)
        self.resident_plan = key
        return t

    # --------------------------------------------------------------- numerics

    def _event_inputs(self, ev: Event) -> dict:
        vocab = self.specs["embedding"].dims["vocab"]
        payload = ev.payload
        if ev.kind == "camera_frame":
            return {"prompt": prompt_tokens(payload.get("prompt", DEFAULT_PROMPT), vocab),
                    "image_seed": int(payload.get("image_seed", 0)),
                    "frames": int(payload.get("frames", 1))}
        if ev.kind == "wake_word":
            utter = prompt_tokens(payload.get("utterance", "hey"), vocab)
            return {"audio": synth_audio(utter, self.stages["tts"])}
        return {"prompt": prompt_tokens(payload.get("prompt", DEFAULT_PROMPT), vocab)}

    def _image(self, image_seed: int, frame: int) -> np.ndarray:
        return synth_image(self.seed, image_seed, frame, self.specs["vision_encoder"].input_shape)

    # -------------------------------------------------------------- parallel

    def run_parallel(self, ev: Event, plan: Optional[PlacementPlan] = None,
                     power_mode=PowerMode.UNCONSTRAINED, alpha=None, rates=None) -> RunReport:
        if self.pm.mode is PowerMode.CRITICAL and self.mode != "parallel":
            raise ConfigError("parallel execution requires a non-Critical power mode")
        plan = plan or self.make_plan(power_mode, alpha)
        t0 = self.clock
        clk = _Clock(t0)
        self.mem.reset_high_water()
        try:
            ready = self._make_resident(clk, plan)
        except OutOfMemory as e:
            if self.placement == "auto":
                raise InfeasiblePlan(f"admission failed after planning: {e}", constraint="memory") from e
            log.warning("placement %s failed admission (%s); replanning", self.placement, e)
            self.release_all()
            plan = self.make_plan(power_mode, alpha, placement="auto")
            try:
                ready = self._make_resident(clk, plan)
            except OutOfMemory as e2:
                raise InfeasiblePlan(f"admission failed after replanning: {e2}", constraint="memory") from e2
        load_s = clk.busy.get(CPU, 0.0)
        inputs = self._event_inputs(ev)
        stages = self.stages
        dec = stages["decoder"]
        tpb = self.tokens_per_batch
        chunks: list = []  # (rows, source, ready_time)
        consumed: list = []
        result: dict = {}
        errors: list = []
        pool = self.pool
        copies0 = pool.counters["payload_copies"]

        # host numerics of the producer side, with simulated times per stage
        frames = 0
        feeds = []  # (EmbeddingBatch, sim ready time)
        if ev.kind == "camera_frame":
            outs = []
            t = ready
            for f in range(inputs["frames"]):
                img = self._image(inputs["image_seed"], f)
                outs.append(stages["vision_encoder"].run(img).payload.astype(np.float32))
                t = self._exec(clk, plan, "vision_encoder", t, img.shape)
                frames += 1
            pooled = np.mean(outs, axis=0) if len(outs) > 1 else outs[0]
            vis = EmbeddingBatch(pooled.shape[0], pooled.shape[1], pooled.astype(np.float16),
                                 "vision_encoder", 0)
            proj = stages["projector"].run(vis)
            t = self._exec(clk, plan, "projector", t, (vis.tokens, vis.dim))
            feeds.append((proj, t))
            emb = stages["embedding"].run(inputs["prompt"])
            te = self._exec(clk, plan, "embedding", ready, (emb.tokens,), calls=max(1, emb.tokens))
            feeds.append((emb, te))
        elif ev.kind == "wake_word":
            toks = stages["audio_stt"].run(inputs["audio"])
            t = self._exec(clk, plan, "audio_stt", ready, inputs["audio"].shape)
            emb = stages["embedding"].run(toks)
            t = self._exec(clk, plan, "embedding", t, (emb.tokens,), calls=max(1, emb.tokens))
            feeds.append((emb, t))
        else:
            emb = stages["embedding"].run(inputs["prompt"])
            t = self._exec(clk, plan, "embedding", ready, (emb.tokens,), calls=max(1, emb.tokens))
            feeds.append((emb, t))
        for batch, t in feeds:
            for i in range(0, batch.tokens, tpb):
                chunks.append((batch.payload[i:i + tpb], batch.source_stage, t))
        n_input = sum(len(c[0]) for c in chunks)
        if n_input == 0:
            raise ConfigError(f"{ev.kind} event at t={ev.at} produced no input tokens")
        dim = dec.spec.dims["dim"]

        def producer():
            try:
                for seq, (rows, source, _) in enumerate(chunks):
                    h = pool.acquire_write(block=True, timeout=READ_TIMEOUT_S)
                    h.array(np.float16, rows.shape)[:] = rows
                    pool.commit_write(h, BatchHeader(rows.shape[0], dim, seq, source))
                h = pool.acquire_write(block=True, timeout=READ_TIMEOUT_S)
                pool.commit_write(h, BatchHeader(0, dim, len(chunks), "end"))
            except Exception as e:  # surfaced by the control actor
                errors.append(e)

        def consumer():
            try:
                state = dec.new_state()
                while True:
                    h = pool.acquire_read(block=True, timeout=READ_TIMEOUT_S)
                    hdr = h.header
                    if hdr.tokens == 0:
                        pool.release_read(h)
                        break
                    dec.forward(state, h.array())
                    consumed.append(hdr.sequence_id)
                    pool.release_read(h)
                result["tokens"] = dec.generate(state, self.new_tokens)
            except Exception as e:
                errors.append(e)

        threads = [threading.Thread(target=producer, name="nanomind-producer"),
                   threading.Thread(target=consumer, name="nanomind-consumer")]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if errors:
            raise errors[0]
        if consumed != list(range(len(chunks))):
            raise RuntimeError(f"ring buffer delivered batches out of order: {consumed}")

        # simulated decoder timeline: chunk i starts once it is produced and chunk i-1 is done
        t_dec = ready
        seen = 0
        for rows, source, t_ready in chunks:
            seen += len(rows)
            clk.mark(t_ready, "commit", source, tokens=len(rows))
            t_dec = self._exec(clk, plan, "decoder", max(t_ready, t_dec), (seen, dim),
                               calls=len(rows), op="prefill")
        prefill_s = clk.stage_time["decoder"]
        # speech synthesis streams behind the decoder, one frame per generated token
        tts_spec = self.specs["tts"]
        frame_cost = replace(tts_spec.cost, act_bytes=tts_spec.cost.act_bytes // tts_spec.dims["frames"],
                             flops=tts_spec.cost.flops // tts_spec.dims["frames"])
        t_tts = t_dec
        for i in range(self.new_tokens):
            seen += 1
            t_dec = self._exec(clk, plan, "decoder", t_dec, (seen, dim), op="decode")
            t_tts = self._exec(clk, plan, "tts", max(t_dec, t_tts), (i + 1,), cost=frame_cost)
        decode_s = clk.stage_time["decoder"] - prefill_s
        tokens = result["tokens"]
        audio = stages["tts"].run(tokens)
        used = set(plan.assignments.values()) | {CPU}
        rep = self._report(ev, "parallel", power_mode, alpha, rates, plan, clk, load_s, prefill_s,
                           decode_s, n_input, tokens, audio, frames, used, idle_all=True)
        rep.counters = {**pool.metrics(), "run_payload_copies": pool.counters["payload_copies"] - copies0}
        return rep

    # --------------------------------------------------------------- cascade

    def run_cascade(self, ev: Event, plan: Optional[PlacementPlan] = None,
                    power_mode=PowerMode.CRITICAL, alpha=None, rates=None) -> RunReport:
        if ev.kind not in CHAINS:
            raise ConfigError(f"no pipeline mapping for event kind {ev.kind!r}")
        plan = plan or self.make_plan(PowerMode.CRITICAL)
        self.release_all()
        t0 = self.clock
        clk = _Clock(t0)
        self.mem.reset_high_water()
        inputs = self._event_inputs(ev)
        stages = self.stages
        dim = self.specs["decoder"].dims["dim"]
        carry = None  # the only value that survives from one stage to the next
        t = t0
        frames = n_input = 0
        prefill_s = decode_s = 0.0
        tokens: list = []
        audio = None
        for name in CHAINS[ev.kind]:
            nbytes = self.specs[name].cost.weight_bytes
            self.mem.admit(name, nbytes)
            clk.mark(t, "admit", name, bytes=nbytes, resident=sorted(self.mem.residents))
            t = self._load(clk, name, t, nbytes)
            stage = stages[name]
            if name == "vision_encoder":
                img = self._image(inputs["image_seed"], 0)
                out = stage.run(img)
                frames = 1
                t = self._exec(clk, plan, name, t, img.shape)
            elif name == "projector":
                out = stage.run(carry)
                t = self._exec(clk, plan, name, t, (carry.tokens, carry.dim))
            elif name == "audio_stt":
                out = stage.run(inputs["audio"])
                t = self._exec(clk, plan, name, t, inputs["audio"].shape)
            elif name == "embedding":
                emb = stage.run(carry if ev.kind == "wake_word" else inputs["prompt"])
                t = self._exec(clk, plan, name, t, (emb.tokens,), calls=max(1, emb.tokens))
                out = emb
                if ev.kind == "camera_frame":
                    # image tokens first, then the prompt, as in the streaming path
                    payload = np.concatenate([carry.payload, emb.payload])
                    out = EmbeddingBatch(payload.shape[0], dim, payload, name, emb.sequence_id)
            elif name == "decoder":
                n_input = carry.tokens
                if n_input == 0:
                    raise ConfigError(f"{ev.kind} event at t={ev.at} produced no input tokens")
                state = stage.new_state()
                stage.forward(state, carry.payload)
                tokens = stage.generate(state, self.new_tokens)
                t = self._exec(clk, plan, name, t, (n_input, dim), calls=n_input, op="prefill")
                prefill_s = clk.stage_time[name]
                seen = n_input
                for _ in range(self.new_tokens):
                    seen += 1
                    t = self._exec(clk, plan, name, t, (seen, dim), op="decode")
                decode_s = clk.stage_time[name] - prefill_s
                out = tokens
            else:
                audio = stage.run(carry)
                t = self._exec(clk, plan, name, t, (len(carry),))
                out = None
            if out is not None:
                self.mem.admit("carry_out", _carry_bytes(out))
            self.mem.release(name)
            self.compiled.pop(name, None)
            if "carry_in" in self.mem.residents:
                self.mem.release("carry_in")
            if out is not None:
                self.mem.admit("carry_in", self.mem.release("carry_out"))
            clk.mark(t, "release", name, resident=sorted(self.mem.residents))
            carry = out
        load_s = sum(e["end"] - e["t"] for e in clk.log if e["op"] == "load")
        used = {CPU} | {plan.assignments[n] for n in CHAINS[ev.kind]}
        return self._report(ev, "cascade", power_mode, alpha, rates, plan, clk, load_s,
                            prefill_s, decode_s, n_input, tokens, audio, frames, used,
                            idle_all=False)

    # ---------------------------------------------------------------- report

    def _report(self, ev, exec_mode, power_mode, alpha, rates, plan, clk, load_s, prefill_s,
                decode_s, n_input, tokens, audio, frames, used, idle_all) -> RunReport:
        span = clk.end - clk.t0
        energy = self._energy(clk, used, span, idle_all)
        self.clock = clk.end
        log_rows = sorted(clk.log, key=lambda e: (e["t"], e["end"]))
        return RunReport(
            event=ev.to_dict(),
            exec_mode=exec_mode,
            power_mode=str(power_mode),
            alpha=alpha,
            rates=dict(sorted((rates or {}).items())),
            plan=plan.to_dict(),
            stage_latency_s=dict(sorted(clk.stage_time.items())),
            load_s=load_s,
            prefill_s=prefill_s,
            decode_s=decode_s,
            e2e_latency_s=span,
            tokens_per_s=len(tokens) / decode_s if decode_s > 0 else 0.0,
            input_tokens=n_input,
            tokens=[int(t) for t in tokens],
            audio_samples=0 if audio is None else int(audio.size),
            frames_consumed=frames,
            peak_memory_bytes=self.mem.high_water,
            arena_bytes=self.pool.arena_bytes if exec_mode == "parallel" else 0,
            energy_j=energy,
            avg_power_w=energy / span if span > 0 else 0.0,
            device_busy_s={str(k): v for k, v in sorted(clk.busy.items(), key=lambda kv: str(kv[0]))},
            recompile_events=sum(e["op"] == "recompile" for e in clk.log),
            started_at=clk.t0,
            event_log=log_rows,
        )

    # ------------------------------------------------------------ event loop

    def dispatch(self, ev: Event) -> RunReport:
        """Run one event in the mode the power policy (or a forced mode) selects."""
        mode, alpha = policy_step(self.pm)
        if mode is PowerMode.CRITICAL:
            rates = apply_throttle(0.0, self.rates, self.mem)
        else:
            rates = apply_throttle(1.0 if alpha is None else alpha, self.rates, self.mem)
        exec_mode = self.mode if self.mode != "auto" else (
            "cascade" if mode is PowerMode.CRITICAL else "parallel")
        if exec_mode == "cascade":
            plan = self.make_plan(PowerMode.CRITICAL)
            return self.run_cascade(ev, plan, mode, alpha, rates)
        plan = self.make_plan(mode if mode is not PowerMode.CRITICAL else PowerMode.UNCONSTRAINED, alpha)
        return self.run_parallel(ev, plan, mode, alpha, rates)

    def idle(self, seconds: float) -> float:
        """Standby: one CPU idling. Returns (and drains) the joules spent."""
        if seconds <= 0:
            return 0.0
        joules = self.devices[CPU].idle_power * seconds
        self.clock += seconds
        self.pm.drain(joules)
        return joules


def _carry_bytes(value) -> int:
    if isinstance(value, EmbeddingBatch):
        return int(value.payload.nbytes)
    if isinstance(value, np.ndarray):
        return int(value.nbytes)
    return 8 * len(value)


def handle_event_loop(runtime: Runtime, trace, horizon: Optional[float] = None) -> EventLoopResult:
    """Dispatch every event in time order, idling the CPU in between.

    Each report's energy is drained from the battery exactly as reported, so
    the power manager's drained total equals the reports' energy plus the
    standby energy.
    """
    trace = list(trace)
    if any(b.at < a.at for a, b in zip(trace, trace[1:])):
        raise ConfigError("event trace must be sorted by timestamp")
    reports = []
    idle_j = 0.0
    for ev in trace:
        idle_j += runtime.idle(ev.at - runtime.clock)
        rep = runtime.dispatch(ev)
        runtime.pm.drain(rep.energy_j)
        reports.append(rep)
    if horizon is not None:
        idle_j += runtime.idle(horizon - runtime.clock)
    return EventLoopResult(reports, idle_j, runtime.pm.total_drained_j, runtime.clock,
                           list(runtime.timeline))


def run_parallel(cfg: ScenarioConfig, event: Optional[Event] = None, **kw) -> RunReport:
    rt = Runtime(cfg, **kw)
    ev = event or cfg.events()[0]
    return rt.run_parallel(ev, power_mode=rt.pm.mode, alpha=rt.pm.alpha)


def run_cascade(event: Event, cfg: ScenarioConfig, **kw) -> RunReport:
    rt = Runtime(cfg, **kw)
    return rt.run_cascade(event, power_mode=rt.pm.mode, alpha=rt.pm.alpha)


def summarize(result: EventLoopResult) -> dict:
    reps = result.reports
    decode = sum(r.decode_s for r in reps)
    generated = sum(len(r.tokens) for r in reps)
    busy = sum(r.e2e_latency_s for r in reps)
    return {
        "events": len(reps),
        "e2e_latency_s": busy,
        "max_e2e_latency_s": max((r.e2e_latency_s for r in reps), default=0.0),
        "decode_s": decode,
        "prefill_s": sum(r.prefill_s for r in reps),
        "load_s": sum(r.load_s for r in reps),
        "tokens_generated": generated,
        "tokens_per_s": generated / decode if decode > 0 else 0.0,
        "peak_memory_bytes": max((r.peak_memory_bytes for r in reps), default=0),
        "active_energy_j": sum(r.energy_j for r in reps),
        "idle_energy_j": result.idle_energy_j,
        "energy_j": result.total_energy_j,
        "avg_power_w": result.total_energy_j / result.end_time if result.end_time > 0 else 0.0,
        "event_avg_power_w": sum(r.energy_j for r in reps) / busy if busy > 0 else 0.0,
        "recompile_events": sum(r.recompile_events for r in reps),
        "payload_copies": sum(r.counters.get("run_payload_copies", 0) for r in reps),
        "sim_end_s": result.end_time,
    }


def run_scenario(cfg: ScenarioConfig, placement: Optional[str] = None,
                 mode: Optional[str] = None) -> dict:
    """Run the whole trace and return the report document."""
    rt = Runtime(cfg, placement, mode)
    initial = rt.make_plan(rt.pm.mode, rt.pm.alpha)
    result = handle_event_loop(rt, cfg.events(), cfg.pipeline["horizon_s"])
    return {
        "scenario": {
            "seed": cfg.seed,
            "placement": rt.placement,
            "mode": rt.mode,
            "battery_percent_start": cfg.power["battery_percent"],
            "battery_percent_end": rt.pm.level,
        },
        "plan": initial.to_dict(),
        "plan_bytes": {str(k): v for k, v in sorted(plan_bytes(initial, list(rt.specs.values())).items(),
                                                    key=lambda kv: str(kv[0]))},
        "summary": summarize(result),
        "events": [r.to_dict() for r in result.reports],
        "timeline": result.timeline,
    }

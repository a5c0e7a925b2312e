"""Token-aware buffer manager: a single-producer/single-consumer ring of slots.

One contiguous arena (standing in for unified DRAM) is carved into ``n_slots``
fixed regions. The producer writes an embedding batch straight into a slot,
the consumer binds that same region as its input, and nothing is copied in
between. Each slot cycles through exactly four states::

    FREE -> ALLOCATED_FOR_WRITE -> READY_TO_READ -> ALLOCATED_FOR_READ -> FREE

State words are only touched under a small lock; payload bytes are accessed
without it. Two conditions (slot freed, slot ready) carry the availability
signal in each direction.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import PayloadTooLarge, ProtocolViolation, WouldBlock
from .toy_model import BatchHeader


class SlotState(enum.IntEnum):
    FREE = 0
    ALLOCATED_FOR_WRITE = 1
    READY_TO_READ = 2
    ALLOCATED_FOR_READ = 3


NEXT_STATE = {
    SlotState.FREE: SlotState.ALLOCATED_FOR_WRITE,
    SlotState.ALLOCATED_FOR_WRITE: SlotState.READY_TO_READ,
    SlotState.READY_TO_READ: SlotState.ALLOCATED_FOR_READ,
    SlotState.ALLOCATED_FOR_READ: SlotState.FREE,
}


@dataclass(frozen=True)
class SlotHandle:
    """Access to one slot's region; valid until the slot's next state change."""

    pool: "RingBufferPool"
    slot_id: int
    offset: int
    capacity: int
    generation: int
    header: Optional[BatchHeader] = None

    @property
    def buffer(self) -> memoryview:
        return self.pool._region(self.slot_id)

    def array(self, dtype=np.float16, shape=None) -> np.ndarray:
        """A numpy view onto the slot region (never a copy)."""
        dtype = np.dtype(dtype)
        if shape is None:
            if self.header is None:
                raise ValueError("shape required before the slot has a header")
            shape = (self.header.tokens, self.header.dim)
        count = int(np.prod(shape))
        if count * dtype.itemsize > self.capacity:
            raise PayloadTooLarge(f"{count * dtype.itemsize} bytes exceed slot capacity {self.capacity}")
        return np.frombuffer(self.pool.arena, dtype=dtype, count=count, offset=self.offset).reshape(shape)


@dataclass
class BufferSlot:
    slot_id: int
    offset: int
    capacity: int
    state: SlotState = SlotState.FREE
    meta: Optional[BatchHeader] = None
    generation: int = 0
    write_offset: Optional[int] = None


class RingBufferPool:
    def __init__(self, n_slots: int, slot_bytes: int):
        if n_slots < 2:
            raise ValueError("a ring buffer pool needs at least 2 slots")
        if slot_bytes <= 0:
            raise ValueError("slot_bytes must be positive")
        self.n_slots = n_slots
        self.slot_bytes = slot_bytes
        self.arena = np.zeros(n_slots * slot_bytes, dtype=np.uint8)
        self.arena_allocations = 1
        self.slots = [BufferSlot(i, i * slot_bytes, slot_bytes) for i in range(n_slots)]
        self.write_cursor = 0
        self.read_cursor = 0
        self._lock = threading.Lock()
        self._slot_freed = threading.Condition(self._lock)
        self._slot_ready = threading.Condition(self._lock)
        self._writing: Optional[SlotHandle] = None
        self._reading: Optional[SlotHandle] = None
        self.observers: list[Callable[[int, SlotState, SlotState], None]] = []
        self.counters = {
            "commits": 0,
            "reads": 0,
            "releases": 0,
            "would_block_write": 0,
            "would_block_read": 0,
            "payload_copies": 0,
            "illegal_transitions": 0,
        }

    @property
    def arena_bytes(self) -> int:
        return self.arena.nbytes

    def _region(self, slot_id: int) -> memoryview:
        s = self.slots[slot_id]
        return memoryview(self.arena)[s.offset : s.offset + s.capacity]

    def _transition(self, slot: BufferSlot, expected: SlotState) -> None:
        if slot.state is not expected:
            self.counters["illegal_transitions"] += 1
            raise ProtocolViolation(
                f"slot {slot.slot_id} is {slot.state.name}, expected {expected.name}"
            )
        new = NEXT_STATE[expected]
        old, slot.state = slot.state, new
        for fn in self.observers:
            fn(slot.slot_id, old, new)

    def _handle(self, slot: BufferSlot) -> SlotHandle:
        return SlotHandle(self, slot.slot_id, slot.offset, slot.capacity, slot.generation, slot.meta)

    def _wait(self, cond: threading.Condition, ready: Callable[[], bool], block: bool,
              timeout: Optional[float], counter: str) -> None:
        if ready():
            return
        if not block:
            self.counters[counter] += 1
            raise WouldBlock(counter)
        if not cond.wait_for(ready, timeout):
            self.counters[counter] += 1
            raise WouldBlock(counter)

    def acquire_write(self, block: bool = False, timeout: Optional[float] = None) -> SlotHandle:
        with self._lock:
            if self._writing is not None:
                raise ProtocolViolation("producer already holds a write slot")
            slot = self.slots[self.write_cursor]
            self._wait(self._slot_freed, lambda: slot.state is SlotState.FREE, block, timeout,
                       "would_block_write")
            self._transition(slot, SlotState.FREE)
            self.write_cursor = (self.write_cursor + 1) % self.n_slots
            self._writing = self._handle(slot)
            return self._writing

    def commit_write(self, handle: SlotHandle, meta: BatchHeader) -> None:
        with self._lock:
            slot = self.slots[handle.slot_id]
            if self._writing is None or self._writing.slot_id != handle.slot_id \
                    or slot.generation != handle.generation:
                self.counters["illegal_transitions"] += 1
                raise ProtocolViolation(f"slot {handle.slot_id} is not held for writing")
            if meta.nbytes > slot.capacity:
                raise PayloadTooLarge(f"batch of {meta.nbytes} bytes exceeds slot capacity {slot.capacity}")
            self._transition(slot, SlotState.ALLOCATED_FOR_WRITE)
            slot.meta = meta
            slot.write_offset = handle.offset
            self._writing = None
            self.counters["commits"] += 1
            self._slot_ready.notify()

    def acquire_read(self, block: bool = False, timeout: Optional[float] = None) -> SlotHandle:
        with self._lock:
            if self._reading is not None:
                raise ProtocolViolation("consumer already holds a read slot")
            slot = self.slots[self.read_cursor]
            self._wait(self._slot_ready, lambda: slot.state is SlotState.READY_TO_READ, block, timeout,
                       "would_block_read")
            self._transition(slot, SlotState.READY_TO_READ)
            if slot.write_offset != slot.offset:
                raise ProtocolViolation("slot region moved between write and read")
            self.read_cursor = (self.read_cursor + 1) % self.n_slots
            self._reading = self._handle(slot)
            self.counters["reads"] += 1
            return self._reading

    def release_read(self, handle: SlotHandle) -> None:
        with self._lock:
            slot = self.slots[handle.slot_id]
            if self._reading is None or self._reading.slot_id != handle.slot_id \
                    or slot.generation != handle.generation:
                self.counters["illegal_transitions"] += 1
                raise ProtocolViolation(f"slot {handle.slot_id} is not held for reading")
            self._transition(slot, SlotState.ALLOCATED_FOR_READ)
            slot.meta = None
            slot.write_offset = None
            slot.generation += 1
            self._reading = None
            self.counters["releases"] += 1
            self._slot_freed.notify()

    def copy_out(self, handle: SlotHandle) -> bytes:
        """Private copy of a slot's payload; counted, since it defeats zero-copy."""
        with self._lock:
            self.counters["payload_copies"] += 1
        n = handle.header.nbytes if handle.header else handle.capacity
        return bytes(self._region(handle.slot_id)[:n])

    @property
    def occupancy(self) -> int:
        return sum(s.state is not SlotState.FREE for s in self.slots)

    def metrics(self) -> dict:
        with self._lock:
            return {
                **self.counters,
                "occupancy": self.occupancy,
                "generations": [s.generation for s in self.slots],
                "arena_bytes": self.arena_bytes,
                "arena_allocations": self.arena_allocations,
            }


def pool_create(n_slots: int, slot_bytes: int) -> RingBufferPool:
    return RingBufferPool(n_slots, slot_bytes)


def acquire_write(pool: RingBufferPool, block: bool = False, timeout=None) -> SlotHandle:
    return pool.acquire_write(block, timeout)


def commit_write(pool: RingBufferPool, handle: SlotHandle, meta: BatchHeader) -> None:
    pool.commit_write(handle, meta)


def acquire_read(pool: RingBufferPool, block: bool = False, timeout=None) -> SlotHandle:
    return pool.acquire_read(block, timeout)


def release_read(pool: RingBufferPool, handle: SlotHandle) -> None:
    pool.release_read(handle)

"""Simulator and reference kernels for modular multimodal inference on a
heterogeneous, battery-powered SoC (CPU, GPU and NPU over unified memory)."""

from .errors import (
    ConfigError, DomainError, EmptyContextError, FormatError, InfeasiblePlan, NanomindError,
    OutOfMemory, PayloadTooLarge, ProtocolViolation, ShapeError, StaticShapeViolation, WouldBlock,
)

__version__ = "0.1.0"

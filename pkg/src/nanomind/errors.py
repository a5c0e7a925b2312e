"""Exception hierarchy shared by every nanomind subsystem."""


class NanomindError(Exception):
    pass


class ShapeError(NanomindError, ValueError):
    pass


class DomainError(NanomindError, ValueError):
    pass


class FormatError(NanomindError, ValueError):
    pass


class EmptyContextError(NanomindError, RuntimeError):
    """Query issued against an attention state that has absorbed no tokens."""


class StaticShapeViolation(NanomindError):
    """Input dims differ from the shape a static-graph device was compiled for.

    ``recompile_cost`` is the latency penalty (seconds) that executing anyway
    would incur.
    """

    def __init__(self, message, recompile_cost=0.0, expected=None, got=None):
        super().__init__(message)
        self.recompile_cost = recompile_cost
        self.expected = expected
        self.got = got


class OutOfMemory(NanomindError):
    def __init__(self, owner, requested, available):
        super().__init__(
            f"cannot admit {requested} bytes for {owner!r}: only {available} bytes free"
        )
        self.owner = owner
        self.requested = requested
        self.available = available


class ProtocolViolation(NanomindError, RuntimeError):
    pass


class WouldBlock(NanomindError):
    """Non-blocking ring-buffer acquire found no slot in the required state."""


class PayloadTooLarge(ProtocolViolation):
    pass


class InfeasiblePlan(NanomindError):
    def __init__(self, message, constraint=None):
        super().__init__(message)
        self.constraint = constraint


class ConfigError(NanomindError, ValueError):
    pass

"""Exception hierarchy shared by every layer of the pipeline."""


class DtError(Exception):
    """Base class for all package errors."""


class InvalidConfig(DtError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = {"config": problems}
        self.problems = dict(problems)
        detail = "; ".join(f"{k}: {v}" for k, v in self.problems.items())
        super().__init__(f"invalid config: {detail}")


# wire protocol
class FrameError(DtError):
    pass


class OversizeFrame(FrameError):
    pass


class UnknownTag(FrameError):
    pass


class MalformedPayload(FrameError):
    pass


class ProtocolViolation(DtError):
    def __init__(self, state, item):
        self.state = state
        self.item = item
        super().__init__(f"protocol violation in {state}: {item!r}")


# simulator / reactor
class UnknownEntity(DtError):
    pass


class InvalidCommand(DtError):
    pass


# twin store
class StaleEvent(DtError):
    pass


class SchemaViolation(DtError):
    def __init__(self, message, line=None, element=None):
        self.line = line
        self.element = element
        where = []
        if line is not None:
            where.append(f"line {line}")
        if element is not None:
            where.append(f"<{element}>")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


# learner
class DimensionMismatch(DtError):
    pass


class ShapeMismatch(DtError):
    pass


class EmptyBatch(DtError):
    pass


# harness
class BindFailure(DtError):
    pass


class IoFailure(DtError):
    pass


class WatchdogTimeout(DtError):
    pass

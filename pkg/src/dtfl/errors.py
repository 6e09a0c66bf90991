"""Exception types raised across the simulator."""


class DtflError(Exception):
    """Base class for all simulator errors."""


class BadConfig(DtflError, ValueError):
    pass


class BadRange(DtflError, ValueError):
    pass


class EmptyDataset(DtflError, ValueError):
    pass


class EmptyShard(DtflError, ValueError):
    pass


class NonFiniteLoss(DtflError, ArithmeticError):
    """Training diverged; usually the learning rate is too large."""


class AllUntrusted(DtflError, ValueError):
    pass


class DegenerateChannel(DtflError, ValueError):
    pass


class LengthMismatch(DtflError, ValueError):
    pass


class BufferTooSmall(DtflError, ValueError):
    pass


class ArchMismatch(DtflError, ValueError):
    pass


class BadK(DtflError, ValueError):
    pass


class ParseError(DtflError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class UnknownKey(ParseError):
    pass


class BadMagic(DtflError, ValueError):
    pass


class TruncatedFile(DtflError, ValueError):
    pass


class CountMismatch(DtflError, ValueError):
    pass

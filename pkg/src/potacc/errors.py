"""Exception hierarchy.

Everything raised on purpose derives from :class:`PotaccError`, so callers
(and the CLI) can separate user-facing validation failures from bugs.
"""


class PotaccError(Exception):
    """Base class for all library errors."""


class UnsupportedBitwidth(PotaccError, ValueError):
    pass


class UnknownScheme(PotaccError, ValueError):
    pass


class AllZeroGroup(PotaccError, ValueError):
    """A weight scale group has no nonzero element, so its scale is undefined."""


class NotAPoTWeight(PotaccError, ValueError):
    """An int8 weight is not within round-off of any level of the scheme."""


class NotALevel(PotaccError, ValueError):
    pass


class InvalidCode(PotaccError, ValueError):
    pass


class AccumulatorOverflow(PotaccError, OverflowError):
    pass


class ShapeMismatch(PotaccError, ValueError):
    pass


class UnsupportedLayer(PotaccError, ValueError):
    pass


class StageError(PotaccError, ValueError):
    """Model is at the wrong pipeline stage for the requested operation."""


class SchemaError(PotaccError, ValueError):
    pass


class ChecksumMismatch(PotaccError, ValueError):
    pass


class VersionUnsupported(PotaccError, ValueError):
    pass


class ConfigInvalid(PotaccError, ValueError):
    pass


class MissingCpuTime(PotaccError, ValueError):
    pass


class NegativePower(PotaccError, ValueError):
    pass


class UnknownPreset(PotaccError, ValueError):
    pass

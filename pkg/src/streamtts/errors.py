"""Exception types shared across the package."""


class StreamTTSError(Exception):
    """Base class for all package errors."""


class DimensionError(StreamTTSError, ValueError):
    pass


class StateError(StreamTTSError, RuntimeError):
    pass


class ParseError(StreamTTSError, ValueError):
    pass


class AlignmentError(StreamTTSError, ValueError):
    pass


class OverrunError(AlignmentError):
    """Duration tokens advanced the phoneme pointer past the last phoneme."""


class SamplingError(StreamTTSError, ValueError):
    pass


class AmbiguityError(StreamTTSError, ValueError):
    """Matched-filter decoding could not pick a unique token."""


class ValidationError(StreamTTSError, ValueError):
    pass


class GenerationFault(StreamTTSError, RuntimeError):
    pass


class NonFiniteLossError(StreamTTSError, FloatingPointError):
    pass

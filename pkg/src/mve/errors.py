"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for every error this package raises on purpose."""


class InvalidInputError(EngineError):
    """Malformed user-supplied data: corpus, query, dump, run file, qrels."""


class InvalidConfigError(EngineError):
    """A configuration value violates its documented constraint."""


class CorruptIndexError(EngineError):
    """An index file failed validation; the message names the failing section."""


class ConsistencyError(EngineError):
    """An internal invariant was violated, e.g. a candidate missing from the store."""


class UsageError(EngineError):
    """Bad command line invocation."""

"""Exception types raised across the fintree pipeline."""

from __future__ import annotations


class FintreeError(Exception):
    """Base class for all fintree errors."""


# --- schema ---------------------------------------------------------------

class EmptyLabel(FintreeError):
    """A relation label string is empty after trimming."""


class MalformedLabel(FintreeError):
    """A label contains ':' but does not split into head:tail:name."""


class DuplicateLabel(FintreeError):
    """The same raw label string appears twice in one registry."""


class NoFallbackLabel(FintreeError):
    """A type pair would get an empty admissible set and no untyped label exists."""


# --- data -----------------------------------------------------------------

class ParseError(FintreeError):
    """A record line could not be parsed; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class SpanError(FintreeError):
    """An instance has out-of-range or overlapping entity spans."""

    def __init__(self, instance_id: str, message: str):
        super().__init__(f"instance {instance_id!r}: {message}")
        self.instance_id = instance_id


class UnknownLabel(FintreeError):
    """A gold relation string is absent from the active label registry."""

    def __init__(self, instance_id: str, raw: str):
        super().__init__(f"instance {instance_id!r}: unknown relation {raw!r}")
        self.instance_id = instance_id
        self.raw = raw


# --- prompting ------------------------------------------------------------

class QueryTooLong(FintreeError):
    """The query (plus separator) alone exceeds max_len; the mask would be cut."""


# --- modeling -------------------------------------------------------------

class DimensionMismatch(FintreeError):
    """Backbone hidden size and head input size disagree."""


class EmptyAllowedSet(FintreeError):
    """A constraint mask would exclude every class."""


# --- training -------------------------------------------------------------

class StateError(FintreeError):
    """An operation was called in an invalid state (e.g. double perturb)."""


class NonFiniteLoss(FintreeError):
    """Training hit a NaN/Inf loss; carries the offending batch ids."""

    def __init__(self, step: int, batch_ids: list[str]):
        super().__init__(f"non-finite loss at step {step}, batch ids {batch_ids}")
        self.step = step
        self.batch_ids = batch_ids


# --- evaluation -----------------------------------------------------------

class IdMismatch(FintreeError):
    """Prediction ids and gold ids are not the same set."""


class MissingGold(FintreeError):
    """An instance to score has no gold relation."""


class IdOrderMismatch(FintreeError):
    """Ensemble runs do not share an identical id order."""


# --- cli ------------------------------------------------------------------

class ConfigError(FintreeError):
    """A run config is invalid; carries the offending field name."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field {field!r}: {message}")
        self.field = field

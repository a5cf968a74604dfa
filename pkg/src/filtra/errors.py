"""Exception types shared across the engine."""

from __future__ import annotations


class FiltraError(Exception):
    """Base class for all engine errors."""


# --- catalog ---------------------------------------------------------------


class ParseError(FiltraError):
    """A catalog record could not be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateItemId(FiltraError):
    def __init__(self, item_id: int):
        super().__init__(f"duplicate item_id {item_id}")
        self.item_id = item_id


class DimMismatch(FiltraError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected embedding dimension {expected}, got {got}")
        self.expected = expected
        self.got = got


class InvalidSpec(FiltraError):
    """Invalid synthesis or build parameters."""


# --- quantization ----------------------------------------------------------


class DegenerateRange(FiltraError):
    """All embedding cells share one value; min/max quantization is undefined."""


class LengthMismatch(FiltraError):
    def __init__(self, a: int, b: int):
        super().__init__(f"vector lengths differ: {a} vs {b}")


# --- clustering ------------------------------------------------------------


class KTooLarge(FiltraError):
    def __init__(self, k: int, n: int):
        super().__init__(f"k={k} exceeds number of rows n={n}")


# --- filter queries --------------------------------------------------------


class FilterSyntaxError(FiltraError):
    def __init__(self, position: int, message: str):
        super().__init__(f"at {position}: {message}")
        self.position = position


class UnknownFeature(FiltraError):
    def __init__(self, name: str):
        super().__init__(f"unknown feature name {name!r}")
        self.name = name


class UnknownValue(FiltraError):
    def __init__(self, value: str):
        super().__init__(f"unknown value string {value!r}")
        self.value = value


# --- scoring ---------------------------------------------------------------


class MissingItem(FiltraError):
    def __init__(self, item_id: int):
        super().__init__(f"item {item_id} not present in embedding cache")
        self.item_id = item_id


class DivByZero(FiltraError):
    """Division by zero inside a value-model formula."""


class UnknownTask(FiltraError):
    def __init__(self, task: str):
        super().__init__(f"formula references unknown task {task!r}")
        self.task = task


# --- snapshots -------------------------------------------------------------


class BadMagic(FiltraError):
    """File does not start with the snapshot magic bytes."""


class VersionUnsupported(FiltraError):
    def __init__(self, version: int):
        super().__init__(f"unsupported snapshot format_version {version}")
        self.version = version


class ChecksumMismatch(FiltraError):
    def __init__(self, section: int):
        super().__init__(f"checksum mismatch in section {section}")
        self.section = section


class TruncatedSnapshot(FiltraError):
    """File ends before a declared section or header field."""


class WriteError(FiltraError):
    """Snapshot could not be written."""


# --- evaluation ------------------------------------------------------------


class EmptyWorkload(FiltraError):
    """Benchmark invoked with no requests."""

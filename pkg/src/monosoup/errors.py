"""Exception hierarchy.

The four branches map onto the CLI exit codes: usage errors exit 2, format
and schema errors exit 3, numerical degeneracies exit 4, and I/O failures
exit 1.
"""


class MonosoupError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(MonosoupError):
    """A parameter or call was invalid before any data was touched."""


class FormatError(MonosoupError):
    """Input data (archive, manifest, schema) is malformed or inconsistent."""


class DegeneracyError(MonosoupError):
    """A numerical quantity required by an operation is undefined."""


class IoFailure(MonosoupError):
    """Reading or writing a file failed at the OS level."""


# -- usage ------------------------------------------------------------------

class OutOfRange(UsageError):
    """A scalar parameter fell outside its documented interval."""


class IndexOutOfRange(UsageError):
    """A rank/split index fell outside [1, r]."""


class EmptyPool(UsageError):
    """A candidate pool with no candidates was passed to a merge."""


class MissingRanking(UsageError):
    """A selection procedure needs a ranking but the pool has none."""


# -- format -----------------------------------------------------------------

class MalformedHeader(FormatError):
    """Archive header is truncated, unparsable, or internally inconsistent."""


class OffsetOverlap(FormatError):
    """Tensor byte ranges overlap each other or run past the file."""


class UnsupportedDtype(FormatError):
    """Archive declares an element type this package does not handle."""


class SchemaMismatch(FormatError):
    """Checkpoints disagree on tensor names, shapes, or dtypes."""

    def __init__(self, name: str, detail: str):
        self.name = name
        self.detail = detail
        super().__init__(f"tensor {name!r}: {detail}" if name else detail)


class ShapeMismatch(FormatError):
    """Two matrices that must share a shape do not."""


class SampleCountMismatch(FormatError):
    """Activation matrices have different numbers of rows."""


class UnknownBlockStructure(FormatError):
    """No depth-block structure could be inferred from tensor names."""


class MalformedManifest(FormatError):
    """A pool manifest or scores file is missing fields or unparsable."""


class EvaluatorFailure(FormatError):
    """An evaluator could not produce a score for a candidate set."""

    def __init__(self, ids, detail: str):
        self.ids = tuple(ids)
        self.detail = detail
        super().__init__(f"evaluating {sorted(self.ids)}: {detail}")


# -- numerical --------------------------------------------------------------

class NonFiniteInput(DegeneracyError):
    """A matrix handed to the spectral kernel contains NaN or Inf."""


class AllZeroSpectrum(DegeneracyError):
    """The singular spectrum carries no energy; rank rules are undefined."""


class DegenerateAngle(DegeneracyError):
    """Task vectors are anti-parallel; the merge coefficient diverges."""

"""Reading, validating, and writing tensor archives.

File layout (bit-exact): bytes 0-7 hold an unsigned 64-bit little-endian
count N, bytes 8..8+N hold UTF-8 JSON mapping each tensor name to
``{"dtype": "F16"|"BF16"|"F32"|"F64", "shape": [...], "data_offsets": [b, e]}``
plus an optional ``"__metadata__"`` string map, and the remainder of the file
holds the raw little-endian row-major buffers addressed by ``data_offsets``
relative to the end of the header.  Offsets must not overlap; gaps are
tolerated on read.  The writer always emits tensors in lexicographic name
order with contiguous offsets, so two writes of the same checkpoint produce
identical files.

Sharded multi-file checkpoints, quantized dtypes, and pickled formats are
out of scope.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import ml_dtypes
import numpy as np

from .errors import (
    IoFailure,
    MalformedHeader,
    OffsetOverlap,
    SchemaMismatch,
    UnsupportedDtype,
)

__all__ = [
    "Tensor",
    "Checkpoint",
    "LayerSchema",
    "read_archive",
    "write_archive",
    "validate_compatibility",
    "cast_to_tag",
]

# Archive tag -> numpy dtype of the stored buffer.
DTYPES = {
    "F16": np.dtype(np.float16),
    "BF16": np.dtype(ml_dtypes.bfloat16),
    "F32": np.dtype(np.float32),
    "F64": np.dtype(np.float64),
}
_TAG_OF = {dt: tag for tag, dt in DTYPES.items()}


def cast_to_tag(values: np.ndarray, tag: str) -> np.ndarray:
    """Round float64 values to the storage dtype (round-to-nearest-even)."""
    if tag not in DTYPES:
        raise UnsupportedDtype(tag)
    # astype with order="C" keeps 0-d shapes (ascontiguousarray would not)
    return np.asarray(values).astype(DTYPES[tag], order="C")


@dataclass(frozen=True)
class Tensor:
    """One named dense tensor, kept in its storage dtype."""

    name: str
    data: np.ndarray

    def __post_init__(self):
        if self.data.dtype not in _TAG_OF:
            raise UnsupportedDtype(str(self.data.dtype))
        if not self.data.flags.c_contiguous:
            object.__setattr__(self, "data", np.ascontiguousarray(self.data))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype_tag(self) -> str:
        return _TAG_OF[self.data.dtype]

    def to_float64(self) -> np.ndarray:
        """All downstream arithmetic runs in float64 regardless of storage."""
        return self.data.astype(np.float64)

    @classmethod
    def from_float64(cls, name: str, values: np.ndarray, tag: str) -> "Tensor":
        return cls(name, cast_to_tag(values, tag))

    def bitwise_equal(self, other: "Tensor") -> bool:
        return (
            self.name == other.name
            and self.dtype_tag == other.dtype_tag
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )


class Checkpoint:
    """An ordered map of uniquely named tensors plus string metadata.

    Iteration order is always lexicographic by name.  Instances are treated
    as immutable after construction and are safe to share across workers.
    """

    def __init__(
        self,
        tensors: Iterable[Tensor] | Mapping[str, Tensor],
        metadata: Mapping[str, str] | None = None,
    ):
        items = tensors.values() if isinstance(tensors, Mapping) else tensors
        table: dict[str, Tensor] = {}
        for t in items:
            if t.name in table:
                raise SchemaMismatch(t.name, "duplicate tensor name")
            table[t.name] = t
        self._tensors = {name: table[name] for name in sorted(table)}
        self.metadata: dict[str, str] = dict(metadata or {})

    @property
    def tensors(self) -> dict[str, Tensor]:
        return self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._tensors.values())

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.metadata != other.metadata or self.names() != other.names():
            return False
        return all(
            a.bitwise_equal(b) for a, b in zip(self, other)
        )

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors)"


@dataclass(frozen=True)
class LayerSchema:
    """The (name, shape, dtype) agreement shared by a set of checkpoints."""

    entries: tuple[tuple[str, tuple[int, ...], str], ...] = field(default=())

    def names(self) -> list[str]:
        return [name for name, _, _ in self.entries]


def _parse_header(raw: bytes) -> tuple[dict, dict[str, str]]:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")
    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")
    return header, metadata


def _parse_entry(name: str, entry) -> tuple[str, tuple[int, ...], int, int]:
    if not isinstance(entry, dict):
        raise MalformedHeader(f"tensor {name!r}: entry must be an object")
    try:
        tag = entry["dtype"]
        shape = entry["shape"]
        begin, end = entry["data_offsets"]
    except (KeyError, TypeError, ValueError):
        raise MalformedHeader(
            f"tensor {name!r}: entry needs dtype, shape, data_offsets"
        ) from None
    if tag not in DTYPES:
        raise UnsupportedDtype(f"tensor {name!r}: dtype {tag!r}")
    if not isinstance(shape, list) or not all(
        isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
    ):
        raise MalformedHeader(f"tensor {name!r}: shape must be non-negative ints")
    if not (isinstance(begin, int) and isinstance(end, int) and 0 <= begin <= end):
        raise MalformedHeader(f"tensor {name!r}: bad data_offsets")
    return tag, tuple(shape), begin, end


def read_archive(path: str | os.PathLike) -> Checkpoint:
    """Load a tensor archive from disk.

    Raises MalformedHeader, OffsetOverlap, or UnsupportedDtype when the file
    violates the layout; the returned checkpoint round-trips byte-for-byte
    through :func:`write_archive`.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None
    if len(raw) < 8:
        raise MalformedHeader("file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise MalformedHeader("declared header length exceeds the file")
    header, metadata = _parse_header(raw[8 : 8 + header_len])
    payload = raw[8 + header_len :]

    tensors: list[Tensor] = []
    ranges: list[tuple[int, int, str]] = []
    for name, entry in header.items():
        tag, shape, begin, end = _parse_entry(name, entry)
        if end > len(payload):
            raise OffsetOverlap(f"tensor {name!r}: byte range runs past the file")
        dtype = DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if end - begin != count * dtype.itemsize:
            raise MalformedHeader(
                f"tensor {name!r}: byte range does not match shape and dtype"
            )
        if end > begin:
            ranges.append((begin, end, name))
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=begin)
        tensors.append(Tensor(name, arr.reshape(shape).copy()))

    ranges.sort()
    for (b0, e0, n0), (b1, _, n1) in zip(ranges, ranges[1:]):
        if b1 < e0:
            raise OffsetOverlap(f"tensors {n0!r} and {n1!r} share bytes")
    return Checkpoint(tensors, metadata)


def write_archive(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write an archive atomically (temp file + rename in the target dir).

    Tensors are laid out contiguously in lexicographic name order, making
    the output a pure function of the checkpoint contents.
    """
    header: dict = {}
    if ckpt.metadata:
        header["__metadata__"] = {k: ckpt.metadata[k] for k in sorted(ckpt.metadata)}
    offset = 0
    buffers: list[bytes] = []
    for t in ckpt:
        blob = t.data.tobytes()
        header[t.name] = {
            "dtype": t.dtype_tag,
            "shape": list(t.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        buffers.append(blob)
        offset += len(blob)
    encoded = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode()

    target = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=target.parent or ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(struct.pack("<Q", len(encoded)))
                fh.write(encoded)
                for blob in buffers:
                    fh.write(blob)
            os.replace(tmp, target)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None


def validate_compatibility(ckpts: list[Checkpoint]) -> LayerSchema:
    """Check that all checkpoints agree tensor-by-tensor and return the schema.

    Two checkpoints are compatible when they hold the same tensor names and
    every shared name has the same shape and dtype.  The check is reflexive
    and insensitive to the order of the input list.
    """
    if not ckpts:
        raise ValueError("need at least one checkpoint")
    first = ckpts[0]
    reference = {t.name: (t.shape, t.dtype_tag) for t in first}
    for other in ckpts[1:]:
        theirs = set(other.names())
        ours = set(reference)
        if theirs != ours:
            name = sorted(ours.symmetric_difference(theirs))[0]
            raise SchemaMismatch(name, "present in one checkpoint but not another")
        for t in other:
            shape, tag = reference[t.name]
            if t.shape != shape:
                raise SchemaMismatch(
                    t.name, f"shape {t.shape} differs from {shape}"
                )
            if t.dtype_tag != tag:
                raise SchemaMismatch(
                    t.name, f"dtype {t.dtype_tag} differs from {tag}"
                )
    entries = tuple((t.name, t.shape, t.dtype_tag) for t in first)
    return LayerSchema(entries)

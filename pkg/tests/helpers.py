"""Shared fixture builders for the test suite."""

import numpy as np

from monosoup import Checkpoint, Tensor
from monosoup.archive import DTYPES


def make_tensor(name: str, values, tag: str = "F32") -> Tensor:
    return Tensor(name, np.asarray(values).astype(DTYPES[tag]))


def make_checkpoint(arrays: dict, tag: str = "F32", metadata=None) -> Checkpoint:
    tensors = [make_tensor(name, values, tag) for name, values in arrays.items()]
    return Checkpoint(tensors, metadata=metadata)


def random_pair(rng, shapes: dict, tag: str = "F32", scale: float = 0.05):
    """A (pre, ft) checkpoint pair with small random updates per tensor."""
    pre = {name: rng.standard_normal(shape) for name, shape in shapes.items()}
    ft = {name: pre[name] + scale * rng.standard_normal(shape) for name, shape in shapes.items()}
    return make_checkpoint(pre, tag), make_checkpoint(ft, tag)


def orthonormal_columns(rng, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q[:, :cols]


def matrix_with_spectrum(rng, m: int, n: int, singulars) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Matrix U diag(s) V.T with known factors; returns (w, u, v)."""
    s = np.asarray(singulars, dtype=np.float64)
    u = orthonormal_columns(rng, m, s.size)
    v = orthonormal_columns(rng, n, s.size)
    return (u * s) @ v.T, u, v

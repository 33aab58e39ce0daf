"""Spectral kernel: thin SVD, rank-selection rules, and the split signals.

Everything here is a pure function over float64 arrays.  A layer's update
matrix is factored once; the two per-layer signals are then cheap functions
of the singular values alone:

* the decay ratio ``(sigma_{k+1} / sigma_1)**2``, which is small when the
  spectrum falls off steeply and 1 when it is flat, and
* the squared low-subspace angle ``cos**2(alpha)``, the fraction of squared
  Frobenius energy carried by the singular directions beyond index k.

``cos**2(alpha)`` is always computed from tail sums of the squared singular
values, never by materializing the low-rank remainder: the high/low split is
orthogonal, so the tail-energy fraction is exact by the Pythagorean identity
and costs O(r) instead of O(m*n*r).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .archive import Tensor
from .errors import AllZeroSpectrum, IndexOutOfRange, NonFiniteInput, OutOfRange

__all__ = [
    "ThinSVD",
    "SpectralSplit",
    "thin_svd",
    "energy_rank",
    "effective_rank",
    "spectral_decay",
    "split_spectrum",
    "flatten_to_matrix",
    "DEGENERACY_FLOOR",
]

# A spectrum with total squared energy below this per-element floor is
# treated as carrying no signal; the entropy normalization is 0/0 there.
DEGENERACY_FLOOR = 1e-24

# Slack subtracted inside ceil() to absorb exp/log roundoff: a flat spectrum
# of n equal values must yield exactly n, not n + 1.
_CEIL_SLACK = 1e-9


@dataclass(frozen=True)
class ThinSVD:
    """Thin factorization W = U @ diag(S) @ V.T with r = min(m, n) columns."""

    u: np.ndarray  # (m, r), orthonormal columns
    s: np.ndarray  # (r,), non-increasing, >= 0
    v: np.ndarray  # (n, r), orthonormal columns

    @property
    def m(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def r(self) -> int:
        return self.s.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T

    def rank_k_matrix(self, k: int) -> np.ndarray:
        """Sum of the first k rank-one terms sigma_i * u_i @ v_i.T."""
        return (self.u[:, :k] * self.s[:k]) @ self.v[:, :k].T

    def is_degenerate(self) -> bool:
        return float(np.sum(self.s**2)) < DEGENERACY_FLOOR * self.m * self.n


@dataclass(frozen=True)
class SpectralSplit:
    """A thin SVD partitioned at index k into high/low energy subspaces."""

    svd: ThinSVD
    k: int
    energy_high: float  # sum of the first k squared singular values
    energy_total: float  # squared Frobenius norm of the full matrix
    rho: float  # spectral decay ratio at k, in [0, 1]
    cos2_alpha: float  # low-subspace energy fraction, in [0, 1]

    def high_matrix(self) -> np.ndarray:
        return self.svd.rank_k_matrix(self.k)

    def low_matrix(self) -> np.ndarray:
        return self.svd.reconstruct() - self.high_matrix()


def thin_svd(w: np.ndarray) -> ThinSVD:
    """Factor a finite m x n float64 matrix into its thin SVD.

    The factorization is made deterministic by a fixed sign convention:
    each (u_i, v_i) pair is flipped so that the entry of u_i with the
    largest absolute value is positive, ties broken by lowest index.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NonFiniteInput("matrix contains NaN or Inf")
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    v = vt.T.copy()
    anchor = np.argmax(np.abs(u), axis=0)  # argmax takes the lowest index on ties
    signs = np.sign(u[anchor, np.arange(u.shape[1])])
    signs[signs == 0.0] = 1.0
    u = u * signs
    v = v * signs
    return ThinSVD(u=u, s=s, v=v)


def _as_spectrum(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64).ravel()
    if s.size == 0 or not np.any(s > 0.0):
        raise AllZeroSpectrum("spectrum carries no positive singular value")
    return s


def energy_rank(s: np.ndarray, retain: float) -> int:
    """Smallest k whose leading squared energy reaches the fraction `retain`.

    `s` must be sorted non-increasing; `retain` lies in (0, 1].
    """
    if not 0.0 < retain <= 1.0:
        raise OutOfRange(f"retain must be in (0, 1], got {retain}")
    s = _as_spectrum(s)
    cumulative = np.cumsum(s**2)
    k = int(np.searchsorted(cumulative, retain * cumulative[-1], side="left")) + 1
    return min(max(k, 1), s.size)


def effective_rank(s: np.ndarray) -> int:
    """Entropy-based effective rank: ceil(exp(H)) for H the Shannon entropy
    of the singular values normalized to sum 1 (0 * ln 0 := 0)."""
    s = _as_spectrum(s)
    p = s / np.sum(s)
    positive = p[p > 0.0]
    entropy = float(-np.sum(positive * np.log(positive)))
    k = math.ceil(math.exp(entropy) - _CEIL_SLACK)
    return min(max(k, 1), s.size)


def spectral_decay(s: np.ndarray, k: int) -> float:
    """Decay ratio (sigma_{k+1} / sigma_1)**2, with 0 when k exhausts the
    spectrum (the steepest possible decay; keeps the tail coefficient 0)."""
    s = np.asarray(s, dtype=np.float64).ravel()
    if s.size == 0 or s[0] <= 0.0:
        raise AllZeroSpectrum("leading singular value is not positive")
    if not 1 <= k <= s.size:
        raise IndexOutOfRange(f"k={k} outside [1, {s.size}]")
    if k == s.size:
        return 0.0
    return float((s[k] / s[0]) ** 2)


def split_spectrum(svd: ThinSVD, k: int) -> SpectralSplit:
    """Partition a factorization at index k and derive the two signals."""
    if not 1 <= k <= svd.r:
        raise IndexOutOfRange(f"k={k} outside [1, {svd.r}]")
    squared = svd.s**2
    total = float(np.sum(squared))
    if total <= 0.0:
        raise AllZeroSpectrum("cannot split a zero spectrum")
    high = float(np.sum(squared[:k]))
    tail = float(np.sum(squared[k:]))
    cos2 = min(max(tail / total, 0.0), 1.0)
    return SpectralSplit(
        svd=svd,
        k=k,
        energy_high=high,
        energy_total=total,
        rho=spectral_decay(svd.s, k),
        cos2_alpha=cos2,
    )


def flatten_to_matrix(t: Tensor) -> np.ndarray | None:
    """View a tensor as a float64 matrix, or None when it has no matrix form.

    Rank-2 tensors map as-is; higher ranks fold trailing axes into columns,
    giving shape (extent_0, product of the rest).  Rank-0/1 tensors and
    tensors with a zero extent have no matrix form.
    """
    shape = t.shape
    if len(shape) < 2 or any(d == 0 for d in shape):
        return None
    values = t.to_float64()
    if len(shape) == 2:
        return values
    return values.reshape(shape[0], -1)

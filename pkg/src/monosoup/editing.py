"""Spectral reweighting of a (pre-trained, fine-tuned) checkpoint pair.

Each rank >= 2 parameter's update is factored, partitioned at an index k
chosen by the rank rule, and rebuilt as

    edited = base + lambda_high * high_part + lambda_low * low_part

with the minimal bilinear coefficient rule

    lambda_low = rho + (1 - rho) * cos(alpha),    lambda_high = 1 - lambda_low.

The rule satisfies four boundary conditions -- f(0, 0) = 0, f(1, c) = 1 and
f(rho, 1) = 1, f(rho, 0) = rho, f(0, c) = c -- and is 1-Lipschitz in both
arguments, so the edit is a damped interpolation that never leaves the
segment between the two input checkpoints.

Rank-0/1 parameters (biases, norm gains) have no spectrum; by default they
are copied from the fine-tuned checkpoint unchanged and flagged in the
report, or optionally interpolated with a fixed coefficient.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .archive import Checkpoint, Tensor, validate_compatibility
from .errors import OutOfRange, ShapeMismatch
from .spectral import (
    effective_rank,
    energy_rank,
    flatten_to_matrix,
    split_spectrum,
    thin_svd,
)

__all__ = [
    "EffectiveRank",
    "FixedEnergy",
    "RankRule",
    "parse_rule",
    "rule_label",
    "select_rank",
    "mixing_coefficients",
    "edit_layer",
    "edit_checkpoint",
    "LayerEditReport",
    "EditReport",
    "STATUS_EDITED",
    "STATUS_PASS_THROUGH",
    "STATUS_DEGENERATE",
]

STATUS_EDITED = "edited"
STATUS_PASS_THROUGH = "pass_through_vector"
STATUS_DEGENERATE = "degenerate_zero_delta"
_STATUSES = (STATUS_EDITED, STATUS_PASS_THROUGH, STATUS_DEGENERATE)


@dataclass(frozen=True)
class EffectiveRank:
    """Choose k per layer from the entropy of the singular values."""


@dataclass(frozen=True)
class FixedEnergy:
    """Choose the smallest k retaining a fixed fraction of squared energy."""

    retain: float

    def __post_init__(self):
        if not 0.0 < self.retain < 1.0:
            raise OutOfRange(f"retain must be in (0, 1), got {self.retain}")


RankRule = EffectiveRank | FixedEnergy


def rule_label(rule: RankRule) -> str:
    if isinstance(rule, FixedEnergy):
        return f"energy:{rule.retain:g}"
    return "effective"


def parse_rule(text: str) -> RankRule:
    """Parse 'effective' or 'energy:<R>' into a rank rule."""
    if text == "effective":
        return EffectiveRank()
    if text.startswith("energy:"):
        try:
            return FixedEnergy(float(text.split(":", 1)[1]))
        except ValueError:
            raise OutOfRange(f"bad energy fraction in rule {text!r}") from None
    raise OutOfRange(f"unknown rank rule {text!r}")


def select_rank(s: np.ndarray, rule: RankRule) -> int:
    """Apply a rank rule to a non-increasing singular value vector."""
    if isinstance(rule, FixedEnergy):
        return energy_rank(s, rule.retain)
    return effective_rank(s)


@dataclass(frozen=True)
class LayerEditReport:
    """Per-tensor record of the split and coefficients actually applied.

    Fields that require a spectrum are None for pass-through and degenerate
    entries; `r` is the min dimension of the flattened matrix (0 for
    vectors) and `energy_total` the squared Frobenius norm of the update.
    """

    name: str
    status: str
    r: int
    energy_total: float
    k: int | None = None
    rho: float | None = None
    cos2_alpha: float | None = None
    lambda_low: float | None = None
    lambda_high: float | None = None

    CSV_FIELDS = (
        "name", "status", "k", "r", "rho", "cos2_alpha",
        "lambda_low", "lambda_high", "energy_total",
    )

    def to_json_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.CSV_FIELDS}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "LayerEditReport":
        return cls(**{f: doc.get(f) for f in cls.CSV_FIELDS})


@dataclass
class EditReport:
    """Whole-model edit report: one entry per tensor, in name order."""

    layers: list[LayerEditReport]
    rank_rule: str

    @property
    def totals(self) -> dict[str, int]:
        counts = {status: 0 for status in _STATUSES}
        for layer in self.layers:
            counts[layer.status] += 1
        return counts

    def to_json_dict(self) -> dict:
        return {
            "rank_rule": self.rank_rule,
            "totals": self.totals,
            "layers": [layer.to_json_dict() for layer in self.layers],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EditReport":
        return cls(
            layers=[LayerEditReport.from_json_dict(d) for d in doc["layers"]],
            rank_rule=doc["rank_rule"],
        )

    def csv_header(self) -> list[str]:
        return list(LayerEditReport.CSV_FIELDS)

    def csv_rows(self):
        for layer in self.layers:
            yield [getattr(layer, f) for f in LayerEditReport.CSV_FIELDS]


def mixing_coefficients(rho: float, cos_alpha: float) -> tuple[float, float]:
    """Map the two per-layer signals to (lambda_low, lambda_high).

    lambda_low = rho + (1 - rho) * cos_alpha is the unique bilinear function
    meeting the boundary conditions listed in the module docstring; the sum
    of the two coefficients is exactly 1.
    """
    if not 0.0 <= rho <= 1.0:
        raise OutOfRange(f"rho must be in [0, 1], got {rho}")
    if not 0.0 <= cos_alpha <= 1.0:
        raise OutOfRange(f"cos_alpha must be in [0, 1], got {cos_alpha}")
    lam_low = rho + (1.0 - rho) * cos_alpha
    lam_low = min(max(lam_low, 0.0), 1.0)  # roundoff can overshoot by 1 ulp
    return lam_low, 1.0 - lam_low


def edit_layer(
    w0: np.ndarray,
    wft: np.ndarray,
    rule: RankRule,
    *,
    name: str = "",
    mix_override: tuple[float, float] | None = None,
) -> tuple[np.ndarray, LayerEditReport]:
    """Edit one layer; returns the edited matrix and its report entry.

    A numerically zero update (squared energy below the degeneracy floor)
    is returned as the fine-tuned layer unchanged.  `mix_override` replaces
    the computed (lambda_low, lambda_high) pair and exists for tests only.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    wft = np.asarray(wft, dtype=np.float64)
    if w0.shape != wft.shape:
        raise ShapeMismatch(f"layer {name!r}: {w0.shape} vs {wft.shape}")
    delta = wft - w0
    svd = thin_svd(delta)
    energy_total = float(np.sum(svd.s**2))
    if svd.is_degenerate():
        report = LayerEditReport(
            name=name, status=STATUS_DEGENERATE, r=svd.r, energy_total=energy_total
        )
        return wft.copy(), report

    k = select_rank(svd.s, rule)
    split = split_spectrum(svd, k)
    cos_alpha = math.sqrt(split.cos2_alpha)
    if mix_override is not None:
        lam_low, lam_high = mix_override
    else:
        lam_low, lam_high = mixing_coefficients(split.rho, cos_alpha)
    high = split.high_matrix()
    edited = w0 + lam_high * high + lam_low * (delta - high)
    report = LayerEditReport(
        name=name,
        status=STATUS_EDITED,
        r=svd.r,
        energy_total=energy_total,
        k=k,
        rho=split.rho,
        cos2_alpha=split.cos2_alpha,
        lambda_low=lam_low,
        lambda_high=lam_high,
    )
    return edited, report


def _edit_one(
    t0: Tensor,
    t1: Tensor,
    rule: RankRule,
    vector_coefficient: float | None,
) -> tuple[Tensor, LayerEditReport]:
    mat0 = flatten_to_matrix(t0)
    if mat0 is None:
        if vector_coefficient is None:
            out = t1
        else:
            mixed = (1.0 - vector_coefficient) * t0.to_float64() + (
                vector_coefficient * t1.to_float64()
            )
            out = Tensor.from_float64(t1.name, mixed, t1.dtype_tag)
        report = LayerEditReport(
            name=t1.name, status=STATUS_PASS_THROUGH, r=0, energy_total=0.0
        )
        return out, report
    mat1 = flatten_to_matrix(t1)
    edited, report = edit_layer(mat0, mat1, rule, name=t1.name)
    tensor = Tensor.from_float64(t1.name, edited.reshape(t1.shape), t1.dtype_tag)
    return tensor, report


def edit_checkpoint(
    pre: Checkpoint,
    ft: Checkpoint,
    rule: RankRule,
    *,
    vector_coefficient: float | None = None,
    threads: int | None = None,
) -> tuple[Checkpoint, EditReport]:
    """Apply the spectral edit to every tensor of a compatible pair.

    Rank >= 2 tensors are edited on their flattened matrices and written
    back in the source dtype; rank-0/1 tensors are copied from `ft` (or
    interpolated when `vector_coefficient` is given).  Layers are processed
    independently, so any worker count yields bit-identical results; the
    report lists tensors in name order.  Metadata passes through from `pre`.
    """
    if vector_coefficient is not None and not 0.0 <= vector_coefficient <= 1.0:
        raise OutOfRange(
            f"vector coefficient must be in [0, 1], got {vector_coefficient}"
        )
    validate_compatibility([pre, ft])
    names = pre.names()
    workers = max(1, threads if threads is not None else os.cpu_count() or 1)

    def job(name: str) -> tuple[Tensor, LayerEditReport]:
        return _edit_one(pre[name], ft[name], rule, vector_coefficient)

    if workers == 1 or len(names) <= 1:
        results = [job(name) for name in names]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, names))

    tensors = [tensor for tensor, _ in results]
    reports = [report for _, report in results]
    edited = Checkpoint(tensors, metadata=dict(pre.metadata))
    return edited, EditReport(layers=reports, rank_rule=rule_label(rule))

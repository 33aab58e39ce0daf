"""Analysis reports: spectra, alignment tables, truncation sweeps, CKA.

Reports serialize to JSON (canonical, round-trips back to the in-memory
structure) and to flat CSV with a stable column order.  Nothing here runs
model inference; activation matrices for CKA arrive as archive files.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archive import Checkpoint, Tensor, validate_compatibility, write_archive
from .editing import EditReport, STATUS_EDITED
from .errors import EmptyPool, IoFailure, OutOfRange, SampleCountMismatch
from .merges import (
    AlignmentProfile,
    CandidatePool,
    TaskVector,
    layer_cosine,
    task_vector,
)
from .spectral import (
    DEGENERACY_FLOOR,
    effective_rank,
    energy_rank,
    flatten_to_matrix,
    spectral_decay,
    thin_svd,
)

__all__ = [
    "LayerSpectrum",
    "SpectrumReport",
    "PairwiseAlignmentTable",
    "LambdaGroupStats",
    "LambdaTable",
    "spectrum_report",
    "pairwise_alignment",
    "pairwise_profiles",
    "truncation_sweep",
    "linear_cka",
    "lambda_distribution",
    "cosine_histogram",
    "emit_report",
]


@dataclass(frozen=True)
class LayerSpectrum:
    """Full spectrum of one layer's update plus its rank statistics."""

    singulars: list[float]
    degenerate: bool
    k_effective: int | None = None
    k_at_retention: dict[str, int] | None = None  # "R" label -> k
    rho_at_keff: float | None = None
    cos2_alpha_at_keff: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "degenerate": self.degenerate,
            "k_effective": self.k_effective,
            "k_at_retention": self.k_at_retention,
            "rho_at_keff": self.rho_at_keff,
            "cos2_alpha_at_keff": self.cos2_alpha_at_keff,
            "singulars": self.singulars,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "LayerSpectrum":
        return cls(
            singulars=list(doc["singulars"]),
            degenerate=doc["degenerate"],
            k_effective=doc.get("k_effective"),
            k_at_retention=doc.get("k_at_retention"),
            rho_at_keff=doc.get("rho_at_keff"),
            cos2_alpha_at_keff=doc.get("cos2_alpha_at_keff"),
        )


def _retention_label(retain: float) -> str:
    return f"{retain:g}"


@dataclass
class SpectrumReport:
    """Per-layer spectra of the update between two checkpoints."""

    per_layer: dict[str, LayerSpectrum]
    retentions: list[float]

    def to_json_dict(self) -> dict:
        return {
            "retentions": self.retentions,
            "per_layer": {
                name: spec.to_json_dict() for name, spec in self.per_layer.items()
            },
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SpectrumReport":
        return cls(
            per_layer={
                name: LayerSpectrum.from_json_dict(spec)
                for name, spec in doc["per_layer"].items()
            },
            retentions=[float(r) for r in doc["retentions"]],
        )

    def csv_header(self) -> list[str]:
        labels = [_retention_label(r) for r in self.retentions]
        return (
            ["layer", "degenerate", "k_effective", "rho_at_keff", "cos2_alpha_at_keff"]
            + [f"k_at_{label}" for label in labels]
            + ["singulars"]
        )

    def csv_rows(self):
        labels = [_retention_label(r) for r in self.retentions]
        for name, spec in self.per_layer.items():
            ks = [
                spec.k_at_retention.get(label) if spec.k_at_retention else None
                for label in labels
            ]
            yield [
                name,
                spec.degenerate,
                spec.k_effective,
                spec.rho_at_keff,
                spec.cos2_alpha_at_keff,
                *ks,
                " ".join(repr(v) for v in spec.singulars),
            ]


def spectrum_report(
    pre: Checkpoint, ft: Checkpoint, retentions: list[float]
) -> SpectrumReport:
    """Spectrum and rank statistics for every matrix layer of the update."""
    validate_compatibility([pre, ft])
    per_layer: dict[str, LayerSpectrum] = {}
    for name in pre.names():
        mat0 = flatten_to_matrix(pre[name])
        if mat0 is None:
            continue
        delta = flatten_to_matrix(ft[name]) - mat0
        s = np.linalg.svd(delta, compute_uv=False)
        total = float(np.sum(s**2))
        if total < DEGENERACY_FLOOR * delta.shape[0] * delta.shape[1]:
            per_layer[name] = LayerSpectrum(singulars=s.tolist(), degenerate=True)
            continue
        k_eff = effective_rank(s)
        per_layer[name] = LayerSpectrum(
            singulars=s.tolist(),
            degenerate=False,
            k_effective=k_eff,
            k_at_retention={
                _retention_label(r): energy_rank(s, r) for r in retentions
            },
            rho_at_keff=spectral_decay(s, k_eff),
            cos2_alpha_at_keff=float(np.sum(s[k_eff:] ** 2) / total),
        )
    return SpectrumReport(per_layer=per_layer, retentions=list(retentions))


@dataclass
class PairwiseAlignmentTable:
    """Symmetric matrix of mean per-layer cosines between candidate updates."""

    ids: list[str]
    mean_cos: np.ndarray

    def to_json_dict(self) -> dict:
        return {"ids": list(self.ids), "mean_cos": self.mean_cos.tolist()}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PairwiseAlignmentTable":
        return cls(ids=list(doc["ids"]), mean_cos=np.asarray(doc["mean_cos"], float))

    def csv_header(self) -> list[str]:
        return ["id"] + list(self.ids)

    def csv_rows(self):
        for i, cid in enumerate(self.ids):
            yield [cid, *[repr(v) for v in self.mean_cos[i].tolist()]]


def pairwise_profiles(
    pre: Checkpoint, pool: CandidatePool
) -> dict[tuple[str, str], AlignmentProfile]:
    """Alignment profile for every unordered candidate pair (i <= j)."""
    if len(pool.candidates) < 2:
        raise EmptyPool("pairwise alignment needs at least two candidates")
    taus: dict[str, TaskVector] = {
        cid: task_vector(pre, ckpt) for cid, ckpt in pool.candidates
    }
    ids = [cid for cid, _ in pool.candidates]
    profiles = {}
    for i, a in enumerate(ids):
        for b in ids[i:]:
            profiles[(a, b)] = layer_cosine(taus[a], taus[b])
    return profiles


def pairwise_alignment(pre: Checkpoint, pool: CandidatePool) -> PairwiseAlignmentTable:
    """Mean per-layer cosine for every candidate pair, mirrored to be
    exactly symmetric with unit diagonal for nonzero task vectors."""
    profiles = pairwise_profiles(pre, pool)
    ids = [cid for cid, _ in pool.candidates]
    size = len(ids)
    table = np.zeros((size, size))
    for i, a in enumerate(ids):
        for j in range(i, size):
            value = profiles[(a, ids[j])].mean
            table[i, j] = value
            table[j, i] = value
    return PairwiseAlignmentTable(ids=ids, mean_cos=table)


def cosine_histogram(
    values: list[float], bins: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of cosine values over [-1, 1]; returns (edges, counts)."""
    counts, edges = np.histogram(np.asarray(values, float), bins=bins, range=(-1, 1))
    return edges, counts


def truncation_sweep(
    pre: Checkpoint,
    ft: Checkpoint,
    retentions: list[float],
    out_dir: str | os.PathLike,
) -> list[tuple[float, Path]]:
    """Write one checkpoint per retention level with the update's low-energy
    tail removed outright (pure truncation, no reweighting).

    Matrix layers become base + rank-k approximation of the update at the
    level's energy rank; vectors and degenerate layers pass through from the
    fine-tuned model.  A plot-data CSV with columns (R, layer, k,
    retained_energy) lands next to the checkpoints.
    """
    validate_compatibility([pre, ft])
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from None

    per_level: dict[float, list[Tensor]] = {r: [] for r in retentions}
    csv_records: list[tuple[float, str, int, float]] = []
    for name in pre.names():
        mat0 = flatten_to_matrix(pre[name])
        passthrough = mat0 is None
        svd = None
        if not passthrough:
            delta = flatten_to_matrix(ft[name]) - mat0
            svd = thin_svd(delta)
            passthrough = svd.is_degenerate()
        if passthrough:
            for r in retentions:
                per_level[r].append(ft[name])
            continue
        squared = np.cumsum(svd.s**2)
        total = float(squared[-1])
        tag = ft[name].dtype_tag
        shape = ft[name].shape
        for r in retentions:
            k = energy_rank(svd.s, r)
            truncated = mat0 + svd.rank_k_matrix(k)
            per_level[r].append(
                Tensor.from_float64(name, truncated.reshape(shape), tag)
            )
            csv_records.append((r, name, k, float(squared[k - 1]) / total))

    written: list[tuple[float, Path]] = []
    for r in retentions:
        path = out / f"truncated_R{_retention_label(r)}.safetensors"
        write_archive(Checkpoint(per_level[r], metadata=dict(pre.metadata)), path)
        written.append((r, path))

    summary = out / "truncation_sweep.csv"
    try:
        with open(summary, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["R", "layer", "k", "retained_energy"])
            for record in csv_records:
                writer.writerow(record)
    except OSError as exc:
        raise IoFailure(f"cannot write {summary}: {exc}") from None
    return written


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two activation matrices.

    Rows are samples, columns features; columns are centered internally.
    Computed on the sample-side Gram matrices, which is algebraically equal
    to ||Yc.T Xc||_F^2 / (||Xc.T Xc||_F * ||Yc.T Yc||_F) and exactly
    symmetric in its arguments.  Returns 0 when either centered matrix is
    numerically zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise OutOfRange("activation matrices must be 2-D")
    if x.shape[0] != y.shape[0]:
        raise SampleCountMismatch(f"{x.shape[0]} samples vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise OutOfRange("need at least 2 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    if np.linalg.norm(xc) < 1e-24 or np.linalg.norm(yc) < 1e-24:
        return 0.0
    gram_x = xc @ xc.T
    gram_y = yc @ yc.T
    cross = float(np.sum(gram_x * gram_y))
    denom = float(np.linalg.norm(gram_x) * np.linalg.norm(gram_y))
    if denom <= 0.0:
        return 0.0
    return min(max(cross / denom, 0.0), 1.0)


@dataclass(frozen=True)
class LambdaGroupStats:
    group: str
    count: int
    lambda_high_mean: float
    lambda_high_min: float
    lambda_high_max: float
    lambda_low_mean: float
    lambda_low_min: float
    lambda_low_max: float
    gap_mean: float
    gap_min: float
    gap_max: float

    CSV_FIELDS = (
        "group", "count",
        "lambda_high_mean", "lambda_high_min", "lambda_high_max",
        "lambda_low_mean", "lambda_low_min", "lambda_low_max",
        "gap_mean", "gap_min", "gap_max",
    )

    def to_json_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.CSV_FIELDS}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "LambdaGroupStats":
        return cls(**{f: doc[f] for f in cls.CSV_FIELDS})


@dataclass
class LambdaTable:
    """Grouped statistics of the mixing coefficients from an edit report."""

    grouping: str
    rows: list[LambdaGroupStats]

    def to_json_dict(self) -> dict:
        return {
            "grouping": self.grouping,
            "rows": [row.to_json_dict() for row in self.rows],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "LambdaTable":
        return cls(
            grouping=doc["grouping"],
            rows=[LambdaGroupStats.from_json_dict(d) for d in doc["rows"]],
        )

    def csv_header(self) -> list[str]:
        return list(LambdaGroupStats.CSV_FIELDS)

    def csv_rows(self):
        for row in self.rows:
            yield [getattr(row, f) for f in LambdaGroupStats.CSV_FIELDS]


def _prefix_group(name: str) -> str:
    """Dotted prefix up to and including the first integer token."""
    tokens = name.split(".")
    for i, token in enumerate(tokens):
        if token.isdigit():
            return ".".join(tokens[: i + 1])
    return tokens[0]


def lambda_distribution(report: EditReport, grouping: str = "layer_index") -> LambdaTable:
    """Mean/min/max of the mixing coefficients and their gap per group.

    `layer_index` groups by the tensor's position in the report;
    `name_prefix` groups by the dotted prefix up to the block index token.
    Only edited layers contribute; an all-degenerate report yields no rows.
    """
    if grouping not in ("layer_index", "name_prefix"):
        raise OutOfRange(f"unknown grouping {grouping!r}")
    groups: dict[str, list[tuple[float, float]]] = {}
    for index, layer in enumerate(report.layers):
        if layer.status != STATUS_EDITED:
            continue
        key = str(index) if grouping == "layer_index" else _prefix_group(layer.name)
        groups.setdefault(key, []).append((layer.lambda_high, layer.lambda_low))
    if grouping == "layer_index":
        ordered = sorted(groups, key=int)
    else:
        ordered = sorted(groups)
    rows = []
    for key in ordered:
        highs = np.array([h for h, _ in groups[key]])
        lows = np.array([l for _, l in groups[key]])
        gaps = highs - lows
        rows.append(
            LambdaGroupStats(
                group=key,
                count=len(groups[key]),
                lambda_high_mean=float(highs.mean()),
                lambda_high_min=float(highs.min()),
                lambda_high_max=float(highs.max()),
                lambda_low_mean=float(lows.mean()),
                lambda_low_min=float(lows.min()),
                lambda_low_max=float(lows.max()),
                gap_mean=float(gaps.mean()),
                gap_min=float(gaps.min()),
                gap_max=float(gaps.max()),
            )
        )
    return LambdaTable(grouping=grouping, rows=rows)


def emit_report(doc, format: str, path: str | os.PathLike) -> None:
    """Serialize a report atomically as JSON or CSV with stable field order."""
    if format == "json":
        payload = json.dumps(doc.to_json_dict(), indent=2) + "\n"
    elif format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        writer.writerow(doc.csv_header())
        for row in doc.csv_rows():
            writer.writerow(["" if v is None else v for v in row])
        payload = buffer.getvalue()
    else:
        raise OutOfRange(f"unknown report format {format!r}")
    target = Path(path)
    try:
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_text(payload)
        os.replace(tmp, target)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None

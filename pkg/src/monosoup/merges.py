"""Multi-checkpoint baselines: soups, pairwise merges, and selection rules.

All merges run elementwise in float64, write results back in the source
dtype, and preserve the shared schema exactly.  Soup averaging always
accumulates candidates in lexicographic id order, so the same member set
produces bit-identical weights no matter how it was selected.
"""

from __future__ import annotations

import logging
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from .archive import Checkpoint, Tensor, validate_compatibility, write_archive
from .errors import (
    DegenerateAngle,
    EmptyPool,
    EvaluatorFailure,
    MissingRanking,
    OutOfRange,
    SchemaMismatch,
    UnknownBlockStructure,
)

__all__ = [
    "TaskVector",
    "AlignmentProfile",
    "CandidatePool",
    "ScoresFile",
    "ExternalCommand",
    "task_vector",
    "layer_cosine",
    "uniform_soup",
    "model_stock",
    "stock_coefficient",
    "wise_ft",
    "lines",
    "greedy_soup",
    "sfgs",
    "detect_blocks",
    "lines_scales",
]

logger = logging.getLogger(__name__)

# Layers with a flattened 2-norm below this take no part in cosine means.
NORM_FLOOR = 1e-24

# A merge coefficient of the form 2c/(1+c) diverges as c -> -1.
_ANTIPODAL = -1.0 + 1e-12


@dataclass(frozen=True)
class TaskVector:
    """Per-tensor difference fine-tuned minus pre-trained, in float64."""

    deltas: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.deltas)


@dataclass(frozen=True)
class AlignmentProfile:
    """Per-layer cosine between two task vectors plus their mean.

    Layers where either side has negligible norm are reported as 0 and do
    not contribute to the mean.
    """

    per_layer: dict[str, float]
    mean: float
    excluded: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean,
            "excluded": list(self.excluded),
            "per_layer": dict(self.per_layer),
        }


@dataclass
class CandidatePool:
    """A pre-trained base plus an ordered list of fine-tuned candidates."""

    pre: Checkpoint
    candidates: list[tuple[str, Checkpoint]]
    ranking: dict[str, float] | None = None

    def __post_init__(self):
        ids = [cid for cid, _ in self.candidates]
        if len(set(ids)) != len(ids):
            raise SchemaMismatch("", "duplicate candidate ids in pool")

    def checkpoint(self, cid: str) -> Checkpoint:
        for other, ckpt in self.candidates:
            if other == cid:
                return ckpt
        raise KeyError(cid)

    def ranked_ids(self) -> list[str]:
        """Candidate ids in descending ranking order (stable on ties)."""
        if self.ranking is None:
            raise MissingRanking("pool has no ranking scores")
        order = [cid for cid, _ in self.candidates]
        try:
            return sorted(order, key=lambda cid: -self.ranking[cid])
        except KeyError as exc:
            raise MissingRanking(f"no ranking score for candidate {exc}") from None


def task_vector(pre: Checkpoint, ft: Checkpoint) -> TaskVector:
    """Elementwise fine-tuned minus pre-trained over a compatible pair."""
    validate_compatibility([pre, ft])
    deltas = {
        name: ft[name].to_float64() - pre[name].to_float64() for name in pre.names()
    }
    return TaskVector(deltas)


def _cosine(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine that saturates to exactly +/-1 when Cauchy-Schwarz is tight,
    so identical (or negated) inputs report 1 (or -1) with no roundoff."""
    num = float(np.dot(x, y))
    den2 = float(np.dot(x, x)) * float(np.dot(y, y))
    if num * num >= den2:
        return 1.0 if num >= 0.0 else -1.0
    return num / math.sqrt(den2)


def layer_cosine(a: TaskVector, b: TaskVector) -> AlignmentProfile:
    """Cosine of the fully flattened tensors, layer by layer."""
    if a.names() != b.names():
        raise SchemaMismatch("", "task vectors cover different tensors")
    per_layer: dict[str, float] = {}
    included: list[float] = []
    excluded: list[str] = []
    for name in a.names():
        x = a.deltas[name].ravel()
        y = b.deltas[name].ravel()
        if x.shape != y.shape:
            raise SchemaMismatch(name, f"shape {x.shape} differs from {y.shape}")
        if float(np.linalg.norm(x)) < NORM_FLOOR or float(np.linalg.norm(y)) < NORM_FLOOR:
            per_layer[name] = 0.0
            excluded.append(name)
            continue
        cos = _cosine(x, y)
        per_layer[name] = cos
        included.append(cos)
    mean = float(np.mean(included)) if included else 0.0
    return AlignmentProfile(per_layer=per_layer, mean=mean, excluded=tuple(excluded))


def _soup_of(members: dict[str, Checkpoint], metadata: dict[str, str]) -> Checkpoint:
    """Uniform average of the member checkpoints, id-sorted accumulation."""
    ordered = [members[cid] for cid in sorted(members)]
    validate_compatibility(ordered)
    first = ordered[0]
    count = float(len(ordered))
    tensors = []
    for name in first.names():
        total = ordered[0][name].to_float64().copy()
        for ckpt in ordered[1:]:
            total += ckpt[name].to_float64()
        tensors.append(Tensor.from_float64(name, total / count, first[name].dtype_tag))
    return Checkpoint(tensors, metadata=metadata)


def uniform_soup(pool: CandidatePool) -> Checkpoint:
    """Elementwise mean of all candidates."""
    if not pool.candidates:
        raise EmptyPool("uniform soup needs at least one candidate")
    validate_compatibility([pool.pre] + [ckpt for _, ckpt in pool.candidates])
    return _soup_of(dict(pool.candidates), dict(pool.pre.metadata))


def stock_coefficient(cos: float) -> float:
    """Alignment weight 2c/(1+c), clamped to [0, 1].

    Monotone increasing on (-1, 1], 0 at orthogonality, 1 at perfect
    alignment; diverges toward -1, which callers must reject.
    """
    if cos <= _ANTIPODAL:
        raise DegenerateAngle(f"coefficient diverges at cosine {cos}")
    lam = 2.0 * cos / (1.0 + cos)
    return min(max(lam, 0.0), 1.0)


def model_stock(
    pre: Checkpoint, ft1: Checkpoint, ft2: Checkpoint
) -> tuple[Checkpoint, AlignmentProfile]:
    """Two-model merge weighted by the per-layer alignment of the updates.

    Each layer is pulled toward the average update by 2c/(1+c) for c the
    cosine between the two task vectors there, clamped to [0, 1]; strongly
    anti-parallel layers (c at -1) make the coefficient diverge and raise
    DegenerateAngle instead.
    """
    validate_compatibility([pre, ft1, ft2])
    tau1 = task_vector(pre, ft1)
    tau2 = task_vector(pre, ft2)
    profile = layer_cosine(tau1, tau2)
    tensors = []
    for name in pre.names():
        cos = profile.per_layer[name]
        try:
            lam = stock_coefficient(cos)
        except DegenerateAngle:
            raise DegenerateAngle(
                f"layer {name!r}: task vectors are anti-parallel"
            ) from None
        if lam == 0.0 and cos < 0.0:
            logger.warning("layer %r: negative alignment %.4f clamped to 0", name, cos)
        merged = pre[name].to_float64() + lam * (
            (tau1.deltas[name] + tau2.deltas[name]) / 2.0
        )
        tensors.append(Tensor.from_float64(name, merged, pre[name].dtype_tag))
    return Checkpoint(tensors, metadata=dict(pre.metadata)), profile


def wise_ft(pre: Checkpoint, ft: Checkpoint, coefficient: float) -> Checkpoint:
    """Uniform linear interpolation (1 - c) * pre + c * ft."""
    if not 0.0 <= coefficient <= 1.0:
        raise OutOfRange(f"coefficient must be in [0, 1], got {coefficient}")
    validate_compatibility([pre, ft])
    tensors = [
        Tensor.from_float64(
            name,
            (1.0 - coefficient) * pre[name].to_float64()
            + coefficient * ft[name].to_float64(),
            pre[name].dtype_tag,
        )
        for name in pre.names()
    ]
    return Checkpoint(tensors, metadata=dict(pre.metadata))


# Dotted-name tokens that introduce a depth-block index.  The first token
# followed by an integer wins, so conv-style "stages.2.blocks.5" groups by
# stage while transformer names group by block.
_BLOCK_TOKENS = ("blocks", "block", "layers", "layer", "resblocks", "stages", "h")


def _match_block(name: str) -> int | None:
    tokens = name.split(".")
    for i, token in enumerate(tokens[:-1]):
        if token in _BLOCK_TOKENS and tokens[i + 1].isdigit():
            return int(tokens[i + 1])
    return None


def detect_blocks(names: list[str]) -> dict[str, int]:
    """Infer a depth-block index for every tensor name.

    Names carrying a recognized `<token>.<int>` pattern take that integer;
    the rest (embeddings, heads, final norms) adopt the block of the matched
    name sharing the longest dotted prefix, ties resolved toward the lowest
    block.  Raises UnknownBlockStructure when nothing matches; callers can
    then supply an explicit block map instead.
    """
    matched = {name: idx for name in names if (idx := _match_block(name)) is not None}
    if not matched:
        raise UnknownBlockStructure(
            "no tensor name matches a known block pattern; pass a block map"
        )
    blocks = dict(matched)
    for name in names:
        if name in blocks:
            continue
        parts = name.split(".")
        best = (-1, None)
        for other, idx in matched.items():
            other_parts = other.split(".")
            common = 0
            for a, b in zip(parts, other_parts):
                if a != b:
                    break
                common += 1
            if common > best[0] or (common == best[0] and idx < best[1]):
                best = (common, idx)
        blocks[name] = best[1]
    return blocks


def lines_scales(block_ids: list[int], alpha: float, beta: float) -> dict[int, float]:
    """Linear depth schedule: the shallowest block scales by alpha, the
    deepest by beta, intermediates linearly in between (beta when L = 1)."""
    distinct = sorted(set(block_ids))
    count = len(distinct)
    if count == 1:
        return {distinct[0]: beta}
    return {
        block: alpha + (beta - alpha) * position / (count - 1)
        for position, block in enumerate(distinct)
    }


def lines(
    pre: Checkpoint,
    ft: Checkpoint,
    alpha: float,
    beta: float,
    block_map: dict[str, int] | None = None,
) -> Checkpoint:
    """Depth-linear scaling of the update: block l of L gets
    alpha + (beta - alpha) * (l - 1) / (L - 1) applied to its task vector."""
    if not 0.0 <= alpha <= beta <= 1.0:
        raise OutOfRange(f"need 0 <= alpha <= beta <= 1, got ({alpha}, {beta})")
    validate_compatibility([pre, ft])
    names = pre.names()
    blocks = dict(block_map) if block_map is not None else detect_blocks(names)
    missing = [name for name in names if name not in blocks]
    if missing:
        raise UnknownBlockStructure(f"block map misses tensors, e.g. {missing[0]!r}")
    scales = lines_scales([blocks[name] for name in names], alpha, beta)
    tensors = []
    for name in names:
        scale = scales[blocks[name]]
        base = pre[name].to_float64()
        merged = base + scale * (ft[name].to_float64() - base)
        tensors.append(Tensor.from_float64(name, merged, pre[name].dtype_tag))
    return Checkpoint(tensors, metadata=dict(pre.metadata))


@dataclass(frozen=True)
class ScoresFile:
    """Scores looked up by the comma-joined sorted id list of the soup."""

    scores: dict[str, float]

    def evaluate(self, ids: tuple[str, ...], soup: Checkpoint) -> float:
        key = ",".join(sorted(ids))
        if key not in self.scores:
            raise EvaluatorFailure(ids, f"no score for id set {key!r}")
        return float(self.scores[key])


@dataclass(frozen=True)
class ExternalCommand:
    """Shell-out evaluator: the tentative soup is written to a temp file
    whose path replaces '{}' in the template (appended if absent); the
    command must print a single finite decimal score on stdout."""

    template: str

    def evaluate(self, ids: tuple[str, ...], soup: Checkpoint) -> float:
        argv = shlex.split(self.template)
        fd, path = tempfile.mkstemp(suffix=".safetensors")
        os.close(fd)
        try:
            write_archive(soup, path)
            if any("{}" in arg for arg in argv):
                argv = [arg.replace("{}", path) for arg in argv]
            else:
                argv = argv + [path]
            proc = subprocess.run(argv, capture_output=True, text=True)
            if proc.returncode != 0:
                raise EvaluatorFailure(
                    ids, f"command exited {proc.returncode}: {proc.stderr.strip()}"
                )
            try:
                score = float(proc.stdout.strip())
            except ValueError:
                raise EvaluatorFailure(
                    ids, f"command output {proc.stdout.strip()!r} is not a number"
                ) from None
            if not np.isfinite(score):
                raise EvaluatorFailure(ids, f"command returned {score}")
            return score
        finally:
            if os.path.exists(path):
                os.unlink(path)


def greedy_soup(pool: CandidatePool, evaluator) -> tuple[Checkpoint, list[str]]:
    """Score-guided soup: visit candidates by descending ranking, keep each
    one iff the tentative soup's score does not fall below the best so far.

    Returns the final soup and the kept ids in inclusion order.
    """
    if not pool.candidates:
        raise EmptyPool("greedy soup needs at least one candidate")
    order = pool.ranked_ids()
    validate_compatibility([pool.pre] + [ckpt for _, ckpt in pool.candidates])
    by_id = dict(pool.candidates)
    selected: list[str] = []
    best = -np.inf
    for cid in order:
        trial = selected + [cid]
        soup = _soup_of({i: by_id[i] for i in trial}, dict(pool.pre.metadata))
        score = evaluator.evaluate(tuple(trial), soup)
        logger.info("greedy soup: %s -> %.6g (best %.6g)", trial, score, best)
        if score >= best:
            selected = trial
            best = score
    final = _soup_of({i: by_id[i] for i in selected}, dict(pool.pre.metadata))
    return final, selected


def sfgs(pool: CandidatePool, threshold: float) -> tuple[Checkpoint, list[str]]:
    """Similarity-filtered greedy soup.

    Seeds with the top-ranked candidate, then admits each next candidate iff
    its mean per-layer cosine to the current members, averaged over the
    member set, reaches the threshold.  With threshold -1 every candidate is
    admitted and the result equals the uniform soup of the pool.
    """
    if not -1.0 <= threshold <= 1.0:
        raise OutOfRange(f"threshold must be in [-1, 1], got {threshold}")
    if not pool.candidates:
        raise EmptyPool("similarity-filtered soup needs at least one candidate")
    order = pool.ranked_ids()
    validate_compatibility([pool.pre] + [ckpt for _, ckpt in pool.candidates])
    by_id = dict(pool.candidates)
    taus = {cid: task_vector(pool.pre, by_id[cid]) for cid in order}
    selected = [order[0]]
    for cid in order[1:]:
        sims = [layer_cosine(taus[cid], taus[member]).mean for member in selected]
        admitted = float(np.mean(sims)) >= threshold
        logger.info("sfgs: %s mean similarity %.6g -> %s", cid, np.mean(sims), admitted)
        if admitted:
            selected.append(cid)
    soup = _soup_of({i: by_id[i] for i in selected}, dict(pool.pre.metadata))
    return soup, selected

"""Command-line entry point.

One subcommand per operation.  Diagnostics go to stderr; data goes to
output files or stdout.  Exit codes: 0 success, 2 usage error, 3 schema or
format error, 4 fatal numerical degeneracy, 1 I/O failure.

Every command accepts ``--config job.json`` holding default values for its
flags (explicit flags win), and the environment variable ``MONOSOUP_LOG``
(error|warn|info|debug) controls verbosity.
"""

import functools
import json
import logging
import os
import sys

# Pin BLAS to one thread per call before numpy loads: layer-level workers
# provide the parallelism, and per-matrix results stay bit-identical no
# matter how many workers run.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import click
import numpy as np

from . import diagnostics, editing, merges
from .archive import Checkpoint, read_archive, write_archive
from .errors import (
    DegeneracyError,
    FormatError,
    IoFailure,
    MalformedManifest,
    MonosoupError,
    OutOfRange,
    SchemaMismatch,
    UsageError,
)

logger = logging.getLogger("monosoup")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

EXIT_IO = 1
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_DEGENERATE = 4


def _exit_code(exc: MonosoupError) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, FormatError):
        return EXIT_FORMAT
    if isinstance(exc, DegeneracyError):
        return EXIT_DEGENERATE
    if isinstance(exc, IoFailure):
        return EXIT_IO
    return EXIT_IO


def guarded(fn):
    """Translate package errors into messages on stderr plus exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MonosoupError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code(exc))

    return wrapper


def _load_config(ctx: click.Context, param: click.Parameter, value):
    if not value:
        return
    try:
        with open(value) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise click.UsageError(f"cannot read config {value}: {exc}")
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"config {value} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise click.UsageError(f"config {value} must be a JSON object")
    # config keys mirror the flags (--report-format -> "report-format"),
    # while click resolves defaults by parameter name
    alias: dict[str, str] = {}
    for p in ctx.command.params:
        alias[p.name] = p.name
        for opt in p.opts:
            alias[opt.lstrip("-").replace("-", "_")] = p.name
    data.pop("seed", None)  # reserved for fixture generation, no runtime effect
    resolved = {}
    unknown = []
    for key, val in data.items():
        name = alias.get(key.replace("-", "_"))
        if name is None:
            unknown.append(key)
        else:
            resolved[name] = val
    if unknown:
        raise click.UsageError(f"config {value} has unknown keys: {sorted(unknown)}")
    ctx.default_map = {**(ctx.default_map or {}), **resolved}


def config_option(fn):
    return click.option(
        "--config",
        type=click.Path(exists=True, dir_okay=False),
        callback=_load_config,
        is_eager=True,
        expose_value=False,
        help="JSON file of defaults for this command's flags.",
    )(fn)


def threads_option(fn):
    return click.option(
        "--threads",
        type=click.IntRange(min=1),
        default=None,
        help="Worker threads (default: available parallelism).",
    )(fn)


_in_path = click.Path(exists=True, dir_okay=False)
_out_path = click.Path(dir_okay=False, writable=True)


def _load_pool(
    pre: Checkpoint, manifest_path: str, rank_by: str, need_ranking: bool
) -> merges.CandidatePool:
    """Read a pool manifest: a JSON list of {id, path, <score fields>...}."""
    try:
        with open(manifest_path) as fh:
            entries = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {manifest_path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"{manifest_path}: not valid JSON: {exc}") from None
    if not isinstance(entries, list):
        raise MalformedManifest(f"{manifest_path}: must be a JSON list")
    candidates = []
    ranking: dict[str, float] = {}
    have_all_scores = True
    for entry in entries:
        if not isinstance(entry, dict) or "id" not in entry or "path" not in entry:
            raise MalformedManifest(
                f"{manifest_path}: every entry needs 'id' and 'path'"
            )
        cid = str(entry["id"])
        candidates.append((cid, read_archive(entry["path"])))
        if rank_by in entry:
            ranking[cid] = float(entry[rank_by])
        else:
            have_all_scores = False
    if need_ranking and not have_all_scores:
        raise MalformedManifest(
            f"{manifest_path}: every entry needs a {rank_by!r} field for ranking"
        )
    return merges.CandidatePool(
        pre=pre,
        candidates=candidates,
        ranking=ranking if have_all_scores and ranking else None,
    )


def _parse_vectors(text: str) -> float | None:
    if text == "pass":
        return None
    if text.startswith("wise:"):
        try:
            return float(text.split(":", 1)[1])
        except ValueError:
            raise OutOfRange(f"bad coefficient in --vectors {text!r}") from None
    raise OutOfRange(f"--vectors must be 'pass' or 'wise:<coefficient>', got {text!r}")


def _load_activations(path: str) -> np.ndarray:
    ckpt = read_archive(path)
    if "activations" not in ckpt:
        raise SchemaMismatch("activations", f"{path} has no 'activations' tensor")
    values = ckpt["activations"].to_float64()
    if values.ndim != 2:
        raise SchemaMismatch("activations", f"{path}: tensor must be 2-D")
    return values


@click.group()
@click.version_option(package_name="monosoup")
def main():
    """Edit, merge, and inspect model checkpoints in weight space."""
    level = _LOG_LEVELS.get(os.environ.get("MONOSOUP_LOG", "warn"), logging.WARNING)
    logging.basicConfig(
        stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s"
    )


@main.command()
@click.option("--pre", "pre_path", type=_in_path, required=True, help="Pre-trained checkpoint.")
@click.option("--ft", "ft_path", type=_in_path, required=True, help="Fine-tuned checkpoint.")
@click.option("--rule", default="effective", show_default=True,
              help="Rank rule: 'effective' or 'energy:<R>' with 0 < R < 1.")
@click.option("--vectors", default="pass", show_default=True,
              help="Rank-0/1 tensors: 'pass' (copy from --ft) or 'wise:<coefficient>'.")
@click.option("--out", "out_path", type=_out_path, required=True, help="Edited checkpoint path.")
@click.option("--report", "report_path", type=_out_path, default=None,
              help="Write the per-layer edit report here.")
@click.option("--report-format", type=click.Choice(["json", "csv"]), default="json",
              show_default=True)
@threads_option
@config_option
@guarded
def edit(pre_path, ft_path, rule, vectors, out_path, report_path, report_format, threads):
    """Reweight the spectral components of a fine-tuning update."""
    rank_rule = editing.parse_rule(rule)
    vector_coefficient = _parse_vectors(vectors)
    pre = read_archive(pre_path)
    ft = read_archive(ft_path)
    edited, report = editing.edit_checkpoint(
        pre,
        ft,
        rank_rule,
        vector_coefficient=vector_coefficient,
        threads=threads,
    )
    write_archive(edited, out_path)
    if report_path:
        diagnostics.emit_report(report, report_format, report_path)
    logger.info("edit: %s", report.totals)


@main.group()
def merge():
    """Multi-checkpoint merging baselines."""


@merge.command("uniform")
@click.option("--pre", "pre_path", type=_in_path, required=True)
@click.option("--pool", "pool_path", type=_in_path, required=True,
              help="JSON manifest: list of {id, path, score?}.")
@click.option("--out", "out_path", type=_out_path, required=True)
@config_option
@guarded
def merge_uniform(pre_path, pool_path, out_path):
    """Elementwise average of all pool candidates."""
    pre = read_archive(pre_path)
    pool = _load_pool(pre, pool_path, "score", need_ranking=False)
    write_archive(merges.uniform_soup(pool), out_path)


@merge.command("stock")
@click.option("--pre", "pre_path", type=_in_path, required=True)
@click.option("--ft1", "ft1_path", type=_in_path, required=True)
@click.option("--ft2", "ft2_path", type=_in_path, required=True)
@click.option("--out", "out_path", type=_out_path, required=True)
@click.option("--profile", "profile_path", type=_out_path, default=None,
              help="Write the per-layer alignment profile here (JSON).")
@config_option
@guarded
def merge_stock(pre_path, ft1_path, ft2_path, out_path, profile_path):
    """Alignment-weighted merge of two fine-tuned checkpoints."""
    merged, profile = merges.model_stock(
        read_archive(pre_path), read_archive(ft1_path), read_archive(ft2_path)
    )
    write_archive(merged, out_path)
    if profile_path:
        diagnostics.emit_report(profile, "json", profile_path)


@merge.command("greedy")
@click.option("--pre", "pre_path", type=_in_path, required=True)
@click.option("--pool", "pool_path", type=_in_path, required=True)
@click.option("--scores", "scores_path", type=_in_path, default=None,
              help="JSON map from comma-joined sorted id list to score.")
@click.option("--eval-cmd", default=None,
              help="Command template scoring a soup file ('{}' is the path).")
@click.option("--rank-by", default="score", show_default=True,
              help="Manifest field ordering the candidate visits.")
@click.option("--out", "out_path", type=_out_path, required=True)
@config_option
@guarded
def merge_greedy(pre_path, pool_path, scores_path, eval_cmd, rank_by, out_path):
    """Validation-guided greedy soup; prints the selected ids as JSON."""
    if (scores_path is None) == (eval_cmd is None):
        raise OutOfRange("give exactly one of --scores or --eval-cmd")
    pre = read_archive(pre_path)
    pool = _load_pool(pre, pool_path, rank_by, need_ranking=True)
    if scores_path is not None:
        try:
            with open(scores_path) as fh:
                table = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedManifest(f"{scores_path}: {exc}") from None
        if not isinstance(table, dict):
            raise MalformedManifest(f"{scores_path}: must be a JSON object")
        evaluator = merges.ScoresFile({k: float(v) for k, v in table.items()})
    else:
        evaluator = merges.ExternalCommand(eval_cmd)
    soup, selected = merges.greedy_soup(pool, evaluator)
    write_archive(soup, out_path)
    click.echo(json.dumps({"selected": selected}))


@merge.command("sfgs")
@click.option("--pre", "pre_path", type=_in_path, required=True)
@click.option("--pool", "pool_path", type=_in_path, required=True)
@click.option("--delta", type=click.FloatRange(-1.0, 1.0), required=True,
              help="Mean-cosine admission threshold.")
@click.option("--rank-by", default="score", show_default=True)
@click.option("--out", "out_path", type=_out_path, required=True)
@config_option
@guarded
def merge_sfgs(pre_path, pool_path, delta, rank_by, out_path):
    """Similarity-filtered greedy soup; prints the selected ids as JSON."""
    pre = read_archive(pre_path)
    pool = _load_pool(pre, pool_path, rank_by, need_ranking=True)
    soup, selected = merges.sfgs(pool, delta)
    write_archive(soup, out_path)
    click.echo(json.dumps({"selected": selected}))


@merge.command("wiseft")
@click.option("--pre", "pre_path", type=_in_path, required=True)
@click.option("--ft", "ft_path", type=_in_path, required=True)
@click.option("--coefficient", type=float, required=True,
              help="Interpolation weight toward the fine-tuned model, in [0, 1].")
@click.option("--out", "out_path", type=_out_path, required=True)
@config_option
@guarded
def merge_wiseft(pre_path, ft_path, coefficient, out_path):
    """Uniform interpolation between pre-trained and fine-tuned weights."""
    merged = merges.wise_ft(read_archive(pre_path), read_archive(ft_path), coefficient)
    write_archive(merged, out_path)


@merge.command("lines")
@click.option("--pre", "pre_path", type=_in_path, required=True)
@click.option("--ft", "ft_path", type=_in_path, required=True)
@click.option("--alpha", type=float, required=True, help="Scale at the shallowest block.")
@click.option("--beta", type=float, required=True, help="Scale at the deepest block.")
@click.option("--block-map", "block_map_path", type=_in_path, default=None,
              help="JSON map tensor name -> block index, overriding detection.")
@click.option("--out", "out_path", type=_out_path, required=True)
@config_option
@guarded
def merge_lines(pre_path, ft_path, alpha, beta, block_map_path, out_path):
    """Depth-linear scaling of the fine-tuning update."""
    block_map = None
    if block_map_path:
        try:
            with open(block_map_path) as fh:
                raw = json.load(fh)
            block_map = {str(k): int(v) for k, v in raw.items()}
        except (OSError, json.JSONDecodeError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedManifest(f"{block_map_path}: {exc}") from None
    merged = merges.lines(
        read_archive(pre_path), read_archive(ft_path), alpha, beta, block_map
    )
    write_archive(merged, out_path)


@main.group()
def inspect():
    """Analysis reports over checkpoints and edit reports."""


@inspect.command("spectrum")
@click.option("--pre", "pre_path", type=_in_path, required=True)
@click.option("--ft", "ft_path", type=_in_path, required=True)
@click.option("--retain", "retentions", type=click.FloatRange(0, 1, min_open=True, max_open=False),
              multiple=True, default=(0.5, 0.7, 0.8, 0.9, 0.95), show_default=True,
              help="Energy fractions to report ranks at (repeatable).")
@click.option("--out", "out_path", type=_out_path, required=True)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
              show_default=True)
@config_option
@guarded
def inspect_spectrum(pre_path, ft_path, retentions, out_path, fmt):
    """Singular spectra and rank statistics of the update, per layer."""
    report = diagnostics.spectrum_report(
        read_archive(pre_path), read_archive(ft_path), list(retentions)
    )
    diagnostics.emit_report(report, fmt, out_path)


@inspect.command("alignment")
@click.option("--pre", "pre_path", type=_in_path, required=True)
@click.option("--pool", "pool_path", type=_in_path, required=True)
@click.option("--out", "out_path", type=_out_path, required=True)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
              show_default=True)
@click.option("--histograms", "hist_dir", type=click.Path(file_okay=False), default=None,
              help="Also write per-pair cosine histograms into this directory.")
@click.option("--bins", type=click.IntRange(min=1), default=50, show_default=True)
@config_option
@guarded
def inspect_alignment(pre_path, pool_path, out_path, fmt, hist_dir, bins):
    """Pairwise mean per-layer cosine table over a candidate pool."""
    pre = read_archive(pre_path)
    pool = _load_pool(pre, pool_path, "score", need_ranking=False)
    profiles = diagnostics.pairwise_profiles(pre, pool)
    ids = [cid for cid, _ in pool.candidates]
    size = len(ids)
    table = np.zeros((size, size))
    for i, a in enumerate(ids):
        for j in range(i, size):
            table[i, j] = table[j, i] = profiles[(a, ids[j])].mean
    diagnostics.emit_report(
        diagnostics.PairwiseAlignmentTable(ids=ids, mean_cos=table), fmt, out_path
    )
    if hist_dir:
        os.makedirs(hist_dir, exist_ok=True)
        for (a, b), profile in profiles.items():
            if a == b:
                continue
            edges, counts = diagnostics.cosine_histogram(
                list(profile.per_layer.values()), bins=bins
            )
            lines_out = ["bin_left,bin_right,count"]
            lines_out += [
                f"{edges[i]!r},{edges[i + 1]!r},{counts[i]}" for i in range(len(counts))
            ]
            path = os.path.join(hist_dir, f"hist_{a}__{b}.csv")
            with open(path, "w") as fh:
                fh.write("\n".join(lines_out) + "\n")


@inspect.command("lambdas")
@click.option("--report", "report_path", type=_in_path, required=True,
              help="An edit report previously written as JSON.")
@click.option("--group", "grouping", type=click.Choice(["layer_index", "name_prefix"]),
              default="layer_index", show_default=True)
@click.option("--out", "out_path", type=_out_path, required=True)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
              show_default=True)
@config_option
@guarded
def inspect_lambdas(report_path, grouping, out_path, fmt):
    """Grouped statistics of the mixing coefficients from an edit report."""
    try:
        with open(report_path) as fh:
            doc = json.load(fh)
        report = editing.EditReport.from_json_dict(doc)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedManifest(f"{report_path}: not an edit report: {exc}") from None
    diagnostics.emit_report(
        diagnostics.lambda_distribution(report, grouping), fmt, out_path
    )


@main.group()
def sweep():
    """Parameter sweeps that write checkpoint families."""


@sweep.command("truncate")
@click.option("--pre", "pre_path", type=_in_path, required=True)
@click.option("--ft", "ft_path", type=_in_path, required=True)
@click.option("--retain", "retentions", type=click.FloatRange(0, 1, min_open=True, max_open=False),
              multiple=True, required=True,
              help="Energy fraction per output checkpoint (repeatable).")
@click.option("--out-dir", "out_dir", type=click.Path(file_okay=False), required=True)
@config_option
@guarded
def sweep_truncate(pre_path, ft_path, retentions, out_dir):
    """Write checkpoints with the update hard-truncated at each level."""
    written = diagnostics.truncation_sweep(
        read_archive(pre_path), read_archive(ft_path), list(retentions), out_dir
    )
    for retain, path in written:
        click.echo(f"{retain:g}\t{path}")


@main.command()
@click.option("--x", "x_path", type=_in_path, required=True,
              help="Archive holding a 2-D tensor named 'activations'.")
@click.option("--y", "y_path", type=_in_path, required=True)
@click.option("--out", "out_path", type=_out_path, default=None,
              help="Also write {\"cka\": value} as JSON.")
@config_option
@guarded
def cka(x_path, y_path, out_path):
    """Linear centered kernel alignment between two activation matrices."""
    value = diagnostics.linear_cka(_load_activations(x_path), _load_activations(y_path))
    click.echo(f"{value:.12g}")
    if out_path:
        with open(out_path, "w") as fh:
            json.dump({"cka": value}, fh)
            fh.write("\n")


if __name__ == "__main__":
    main()

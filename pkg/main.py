#!/usr/bin/env python3
"""
cellsketch command line.

    sketch    build the R x B density sketch (pass 1) and save it
    density   estimated Min-Max density of every cell
    sample    IMD-weighted (or --uniform) subset without replacement;
              --plan-out saves the plan, --plan samples from a saved one
    discover  attention-map aggregation into a ranked gene-pair list
    eval      NES of a ranked list against ground-truth interactions
    oracle    exact Min-Max densities, for validation
    baseline  Pearson / Spearman co-expression difference ranking
    sweep     WDS vs uniform sampling sweep report
    synth     write the synthetic fixture
"""

from contextlib import contextmanager
from typing import Dict, List, Optional
import argparse
import logging
import sys

import numba
import torch

import config as settings
from attention_toy import build_model, iter_attention
from data import write_fixture
from density_sketch import build, build_sharded, load_sketch, query_all, save_sketch, write_scores
from diversity_sampler import (
    fraction_to_k,
    imd,
    read_plan,
    read_subset,
    sample_without_replacement,
    uniform_plan,
    write_plan,
    write_subset,
)
from enrichment_eval import nes, parse_ground_truth, write_result
from errors import CellSketchError, ConfigMismatchError
from evaluate import SamplingSweepEvaluator
from interaction_aggregator import (
    aggregate_stream,
    baseline_correlation_rank,
    read_ranked_pairs,
    subset_weights,
    write_ranked_pairs,
)
from models import Dataset, RunConfig, SampledSubset, SamplingPlan
from seeding import derive_seed
from sparse_data import DEFAULT_TOTAL_SCALE, exact_density_all, load_dataset, normalize_dataset, parse_symbols

logger = logging.getLogger(__name__)

SAMPLING_COMMANDS = {"sample"}


@contextmanager
def output_stream(path: Optional[str]):
    if path:
        with open(path, "w", encoding="utf-8") as f:
            yield f
    else:
        yield sys.stdout


def configure_threads(threads: int):
    numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
    torch.set_num_threads(threads)


def require(value, flag: str):
    if not value:
        raise ValueError(f"{flag} is required for this command")
    return value


def read_dataset(config: RunConfig, with_labels: bool = True) -> Dataset:
    dataset = load_dataset(
        require(config.expr_path, "--expr"),
        config.labels_path if with_labels else None,
        config.symbols_path,
    )
    if config.normalize:
        dataset = normalize_dataset(dataset, config.normalize_scale)
    return dataset


def draw_plan(config: RunConfig, dataset: Optional[Dataset]) -> SamplingPlan:
    seed = derive_seed(config.seed, "sample")
    if config.plan_path:
        with open(config.plan_path, encoding="utf-8") as f:
            plan = read_plan(f, seed)
        if dataset is not None and sorted(plan.cell_ids) != sorted(dataset.cell_ids):
            raise ConfigMismatchError(f"plan {config.plan_path} does not cover the dataset's cells")
        return plan
    if config.uniform:
        return uniform_plan(dataset, seed)
    return imd(density_scores(config, dataset), seed)


def draw_subset(config: RunConfig, dataset: Optional[Dataset]) -> SampledSubset:
    plan = draw_plan(config, dataset)
    if config.plan_out_path:
        with open(config.plan_out_path, "w", encoding="utf-8") as f:
            write_plan(plan, f)
    n = len(plan.cell_ids)
    k = config.sample_k if config.sample_k is not None else fraction_to_k(config.sample_fraction, n)
    subset = sample_without_replacement(plan, k)
    source = "plan file" if config.plan_path else ("uniform" if config.uniform else "IMD")
    logger.info(f"🎯 Sampled {len(subset.members)} of {n} cells ({source})")
    return subset


def density_scores(config: RunConfig, dataset: Dataset):
    if config.sketch_path:
        sketch = load_sketch(config.sketch_path)
        if sketch.n_items != dataset.n_cells:
            logger.warning(f"⚠️  Sketch summarizes {sketch.n_items} cells, dataset has {dataset.n_cells}")
        return query_all(sketch, dataset)
    return query_all(make_sketch(config, dataset), dataset)


def make_sketch(config: RunConfig, dataset: Dataset):
    if config.threads > 1:
        return build_sharded(dataset, config.hash_config, n_shards=config.threads, n_jobs=config.threads)
    return build(dataset, config.hash_config)


def cmd_sketch(config: RunConfig):
    save_sketch(make_sketch(config, read_dataset(config, with_labels=False)), require(config.out_path, "--out"))


def cmd_density(config: RunConfig):
    scores = density_scores(config, read_dataset(config, with_labels=False))
    with output_stream(config.out_path) as out:
        write_scores(scores, out)


def cmd_oracle(config: RunConfig):
    scores = exact_density_all(read_dataset(config, with_labels=False))
    with output_stream(config.out_path) as out:
        write_scores(scores, out)


def cmd_sample(config: RunConfig):
    dataset = None if config.plan_path else read_dataset(config, with_labels=False)
    subset = draw_subset(config, dataset)
    with output_stream(config.out_path) as out:
        write_subset(subset, out)


def cmd_discover(config: RunConfig):
    dataset = read_dataset(config)
    subset = None
    if config.subset_path:
        with open(config.subset_path, encoding="utf-8") as f:
            subset = read_subset(f)
    elif config.sample_fraction is not None or config.sample_k is not None:
        subset = draw_subset(config, dataset)
    if subset is not None:
        dataset = dataset.subset(subset.cell_ids)

    weights = None
    if config.weighted_estimator:
        if subset is None:
            raise ValueError("--weighted-estimator needs a sampled subset (--subset, --fraction or -k)")
        weights = subset_weights(dataset, subset)

    model = build_model(config.encoder_config(dataset.n_genes), config.weights_path)
    maps = iter_attention(list(dataset.cells()), model, config.batch_size)
    ranked = aggregate_stream(dataset, maps, config.mode, weights)
    logger.info(f"🧬 Ranked {len(ranked)} gene pairs")
    with output_stream(config.out_path) as out:
        write_ranked_pairs(ranked, out, dataset.gene_symbols)


def read_ground_truth(config: RunConfig, n_genes: Optional[int] = None):
    symbols = None
    if config.symbols_path:
        with open(config.symbols_path, encoding="utf-8") as f:
            symbols = parse_symbols(f, n_genes)
    with open(require(config.ground_truth_path, "--ground-truth"), encoding="utf-8") as f:
        return parse_ground_truth(f, symbols, n_genes)


def cmd_eval(config: RunConfig):
    with open(require(config.ranked_path, "--ranked"), encoding="utf-8") as f:
        ranked = read_ranked_pairs(f)
    result = nes(ranked, read_ground_truth(config), config.n_perm, derive_seed(config.seed, "nes"), config.threads)
    with output_stream(config.out_path) as out:
        write_result(result, out)


def cmd_baseline(config: RunConfig):
    dataset = read_dataset(config)
    ranked = baseline_correlation_rank(dataset, config.method, config.min_cells)
    with output_stream(config.out_path) as out:
        write_ranked_pairs(ranked, out, dataset.gene_symbols)


def cmd_sweep(config: RunConfig, fractions: List[float], rows: List[int], repeats: int):
    dataset = read_dataset(config)
    truth = read_ground_truth(config, dataset.n_genes)
    model = build_model(config.encoder_config(dataset.n_genes), config.weights_path)
    evaluator = SamplingSweepEvaluator(dataset, truth, model, config)
    report = evaluator.run(fractions, rows, repeats)
    if config.out_path:
        evaluator.save_report(report, config.out_path)
    else:
        report.to_csv(sys.stdout, sep="\t", index=False, float_format="%.6g")


def cmd_synth(config: RunConfig):
    write_fixture(require(config.out_path, "--out"), config.seed)


def _float_list(text: str) -> List[float]:
    return [float(part) for part in text.split(",") if part]


def _int_list(text: str) -> List[int]:
    return [int(part) for part in text.split(",") if part]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file (flags override it)")
    common.add_argument("--expr", dest="expr_path")
    common.add_argument("--labels", dest="labels_path")
    common.add_argument("--symbols", dest="symbols_path")
    common.add_argument("--ground-truth", dest="ground_truth_path")
    common.add_argument("--sketch", dest="sketch_path")
    common.add_argument("--subset", dest="subset_path")
    common.add_argument("--plan", dest="plan_path", help="sample from a saved plan TSV instead of densities")
    common.add_argument("--plan-out", dest="plan_out_path", help="also write the sampling plan TSV")
    common.add_argument("--ranked", dest="ranked_path")
    common.add_argument("--out", dest="out_path")
    common.add_argument("--seed", type=int)
    common.add_argument("--rows", dest="n_rows", type=int, help="hash rows R")
    common.add_argument("--range", dest="n_buckets", type=int, help="buckets per row B")
    sampling = common.add_mutually_exclusive_group()
    sampling.add_argument("--fraction", dest="sample_fraction", type=float)
    sampling.add_argument("-k", dest="sample_k", type=int)
    common.add_argument("--uniform", action="store_true", default=None)
    common.add_argument("--mode", choices=["all", "positive", "contrastive"])
    common.add_argument("--weighted-estimator", dest="weighted_estimator", action="store_true", default=None)
    common.add_argument("--normalize", nargs="?", type=float, const=DEFAULT_TOTAL_SCALE, metavar="SCALE")
    common.add_argument("--weights", dest="weights_path", help="weight manifest (blob next to it)")
    common.add_argument("--d-model", dest="d_model", type=int)
    common.add_argument("--layers", dest="n_layers", type=int)
    common.add_argument("--heads", dest="n_heads", type=int)
    common.add_argument("--d-ff", dest="d_ff", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--n-perm", dest="n_perm", type=int)
    common.add_argument("--method", choices=["pearson", "spearman"])
    common.add_argument("--min-cells", dest="min_cells", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cellsketch", description="Min-Max density sketching and gene-pair discovery")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in ("sketch", "density", "sample", "discover", "eval", "oracle", "baseline", "synth"):
        commands.add_parser(name, parents=[common])
    sweep = commands.add_parser("sweep", parents=[common])
    sweep.add_argument("--fractions", type=_float_list, default=[0.01, 0.02, 0.05, 0.1])
    sweep.add_argument("--rows-list", dest="rows_list", type=_int_list, default=[100, 200, 500])
    sweep.add_argument("--repeats", type=int, default=5)
    return parser


FLAG_FIELDS = [
    "expr_path", "labels_path", "symbols_path", "ground_truth_path", "sketch_path", "subset_path", "plan_path",
    "plan_out_path", "ranked_path", "out_path", "seed", "n_rows", "n_buckets", "sample_fraction", "sample_k",
    "uniform", "mode", "weighted_estimator", "weights_path", "d_model", "n_layers", "n_heads", "d_ff", "batch_size",
    "n_perm", "method", "min_cells", "threads",
]


def resolve_config(args: argparse.Namespace) -> RunConfig:
    flags: Dict = {name: getattr(args, name) for name in FLAG_FIELDS}
    if args.normalize is not None:
        flags["normalize"] = True
        flags["normalize_scale"] = args.normalize
    merged = settings.resolve(flags, args.config)
    merged["sampling"] = args.command in SAMPLING_COMMANDS
    return RunConfig(**merged)


COMMANDS = {
    "sketch": cmd_sketch,
    "density": cmd_density,
    "sample": cmd_sample,
    "discover": cmd_discover,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "baseline": cmd_baseline,
    "synth": cmd_synth,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else settings.LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        configure_threads(config.threads)
        logger.info(f"🚀 cellsketch {args.command} (seed {config.seed})")
        if args.command == "sweep":
            cmd_sweep(config, args.fractions, args.rows_list, args.repeats)
        else:
            COMMANDS[args.command](config)
    except (CellSketchError, ValueError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

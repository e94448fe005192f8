"""
Inverse Min-Max Density (IMD) sampling.

Densities become softmax(1 / w) probabilities, and subsets are drawn without
replacement with exponential keys: cell x gets key u_x ** (1 / I(x)) and the
k largest keys win. Keys are compared in log space, log(u_x) / I(x).
"""

from typing import List, TextIO, Union
import logging

import numpy as np

from errors import EmptyInputError, ParseError
from models import Dataset, DiversityScores, SampledSubset, SamplingPlan
from seeding import stream

logger = logging.getLogger(__name__)


def imd(scores: DiversityScores, seed: int = 0) -> SamplingPlan:
    """Softmax of inverse densities, with max-subtraction."""
    if not scores.cell_ids:
        raise EmptyInputError("no densities to turn into a sampling plan")
    if not np.all(scores.densities > 0):
        bad = scores.cell_ids[int(np.argmin(scores.densities))]
        raise ValueError(f"density of cell {bad} is zero; IMD needs positive densities")
    inverse = 1.0 / scores.densities
    weights = np.exp(inverse - inverse.max())
    return SamplingPlan(cell_ids=list(scores.cell_ids), probabilities=weights / weights.sum(), seed=seed)


def uniform_plan(cells: Union[Dataset, List[str]], seed: int = 0) -> SamplingPlan:
    """Baseline plan giving every cell probability 1/n."""
    cell_ids = list(cells.cell_ids) if isinstance(cells, Dataset) else list(cells)
    if not cell_ids:
        raise EmptyInputError("no cells to sample from")
    return SamplingPlan(cell_ids=cell_ids, probabilities=np.full(len(cell_ids), 1.0 / len(cell_ids)), seed=seed)


def sampling_keys(plan: SamplingPlan) -> np.ndarray:
    """log(u_x) / I(x) for every cell, u_x in (0, 1] drawn in plan order."""
    u = 1.0 - stream(plan.seed, "keys").random(len(plan.cell_ids))
    return np.log(u) / plan.probabilities


def sample_without_replacement(plan: SamplingPlan, k: int) -> SampledSubset:
    """The min(k, n) cells with the largest keys, in decreasing key order."""
    if k < 0:
        raise ValueError("k must be non-negative")
    n = len(plan.cell_ids)
    take = min(k, n)
    if take == 0:
        return SampledSubset(members=[], target_k=k, population=n)

    keys = sampling_keys(plan)
    chosen = np.arange(n) if take == n else np.argpartition(-keys, take - 1)[:take]
    # equal keys resolve by plan position
    chosen = chosen[np.lexsort((chosen, -keys[chosen]))]
    members = [(plan.cell_ids[pos], float(plan.probabilities[pos])) for pos in chosen.tolist()]
    logger.debug(f"Sampled {take} of {n} cells")
    return SampledSubset(members=members, target_k=k, population=n)


def fraction_to_k(fraction: float, n: int) -> int:
    if not 0 < fraction <= 1:
        raise ValueError("sample fraction must lie in (0, 1]")
    return max(1, int(np.floor(fraction * n + 0.5)))


def sample_fraction(plan: SamplingPlan, fraction: float) -> SampledSubset:
    return sample_without_replacement(plan, fraction_to_k(fraction, len(plan.cell_ids)))


def variance_factor(subset: SampledSubset) -> float:
    """sum(I^2) / (sum I)^2 over the subset; 1/k for k equal weights."""
    if not subset.members:
        raise EmptyInputError("variance factor of an empty subset")
    weights = subset.weights
    return float(np.sum(weights**2) / np.sum(weights) ** 2)


def write_plan(plan: SamplingPlan, out: TextIO):
    out.writelines(f"{cell_id}\t{p!r}\n" for cell_id, p in zip(plan.cell_ids, plan.probabilities.tolist()))


def write_subset(subset: SampledSubset, out: TextIO):
    out.writelines(f"{cell_id}\t{p!r}\n" for cell_id, p in subset.members)


def _read_pairs(lines: TextIO, what: str):
    rows = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 2:
            raise ParseError(f"{what} lines must be `cell_id<TAB>probability`", line_no)
        try:
            rows.append((fields[0], float(fields[1])))
        except ValueError:
            raise ParseError(f"probability must be a number, got {fields[1]!r}", line_no) from None
    return rows


def read_plan(lines: TextIO, seed: int = 0) -> SamplingPlan:
    rows = _read_pairs(lines, "plan")
    return SamplingPlan(cell_ids=[c for c, _ in rows], probabilities=[p for _, p in rows], seed=seed)


def read_subset(lines: TextIO) -> SampledSubset:
    members = _read_pairs(lines, "subset")
    return SampledSubset(members=members, target_k=len(members), population=len(members))

"""
Gene-pair interaction discovery from per-cell attention maps.

Every off-diagonal map entry (p, q) is scatter-added into sparse global
accumulators keyed by the gene pair: Z sums the (weighted) attention values
and M sums the weights. The final score of a pair is Z/M, averaged over the
two directions, and pairs are ranked by it.
"""

import io
from typing import Iterable, List, Optional, Sequence, TextIO, Tuple
import logging

import numpy as np
import pandas as pd
from scipy import stats

from errors import ConfigMismatchError, EmptyInputError, LabelsRequiredError, ParseError
from models import (
    AggregationMode,
    AttentionMap,
    CorrelationMethod,
    Dataset,
    NEGATIVE,
    POSITIVE,
    RankedPairs,
    SampledSubset,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "ZM1"
# pending scatter entries kept before folding them into the sorted totals
CONSOLIDATE_AT = 4_000_000


class InteractionAccumulator:
    """Sparse Z (value sums) and M (weight sums) keyed by i * V + j, i != j."""

    def __init__(self, n_genes: int):
        if n_genes <= 0:
            raise ValueError("n_genes must be positive")
        self.n_genes = n_genes
        self.n_cells = 0
        self.weight_total = 0.0
        self._keys = np.empty(0, dtype=np.int64)
        self._z = np.empty(0)
        self._m = np.empty(0)
        self._pending: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._pending_size = 0

    def add(self, attention: AttentionMap, weight: float = 1.0):
        if not weight > 0:
            raise ValueError(f"cell weight must be positive, got {weight}")
        genes = attention.gene_indices
        if genes.size and genes.max() >= self.n_genes:
            raise ConfigMismatchError(f"attention map indexes genes beyond V={self.n_genes}")
        m = genes.size
        rows, cols = np.repeat(genes, m), np.tile(genes, m)
        off = rows != cols
        keys = rows[off] * self.n_genes + cols[off]
        values = attention.values.reshape(-1)[off]
        self._pending.append((keys, weight * values, np.full(keys.size, float(weight))))
        self._pending_size += keys.size
        self.n_cells += 1
        self.weight_total += weight
        if self._pending_size >= CONSOLIDATE_AT:
            self._consolidate()

    def _consolidate(self):
        if not self._pending:
            return
        keys = np.concatenate([self._keys, *(k for k, _, _ in self._pending)])
        z = np.concatenate([self._z, *(v for _, v, _ in self._pending)])
        m = np.concatenate([self._m, *(w for _, _, w in self._pending)])
        self._keys, inverse = np.unique(keys, return_inverse=True)
        self._z = np.bincount(inverse, weights=z, minlength=self._keys.size)
        self._m = np.bincount(inverse, weights=m, minlength=self._keys.size)
        self._pending, self._pending_size = [], 0

    def totals(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(keys, Z, M) sorted by key."""
        self._consolidate()
        return self._keys, self._z, self._m

    def __len__(self) -> int:
        return int(self.totals()[0].size)

    def get(self, i: int, j: int) -> Tuple[float, float]:
        keys, z, m = self.totals()
        pos = np.searchsorted(keys, i * self.n_genes + j)
        if pos < keys.size and keys[pos] == i * self.n_genes + j:
            return float(z[pos]), float(m[pos])
        return 0.0, 0.0


def accumulate_cell(acc: InteractionAccumulator, attention: AttentionMap, weight: float = 1.0):
    acc.add(attention, weight)


def merge(a: InteractionAccumulator, b: InteractionAccumulator) -> InteractionAccumulator:
    """Key-wise sum of two accumulators over the same vocabulary."""
    if a.n_genes != b.n_genes:
        raise ConfigMismatchError(f"cannot merge accumulators over V={a.n_genes} and V={b.n_genes}")
    merged = InteractionAccumulator(a.n_genes)
    for part in (a, b):
        keys, z, m = part.totals()
        merged._pending.append((keys, z, m))
        merged._pending_size += keys.size
    merged.n_cells = a.n_cells + b.n_cells
    merged.weight_total = a.weight_total + b.weight_total
    merged._consolidate()
    return merged


def finalize(acc: InteractionAccumulator) -> RankedPairs:
    """Rank canonical pairs by Z/M averaged over both directions; support is M_ij + M_ji."""
    keys, z, m = acc.totals()
    if keys.size == 0:
        raise EmptyInputError("no off-diagonal attention has been accumulated")
    i, j = np.divmod(keys, acc.n_genes)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    canonical, inverse = np.unique(lo * acc.n_genes + hi, return_inverse=True)
    directions = np.bincount(inverse, minlength=canonical.size)
    score = np.bincount(inverse, weights=z / m, minlength=canonical.size) / directions
    support = np.bincount(inverse, weights=m, minlength=canonical.size)
    gene_i, gene_j = np.divmod(canonical, acc.n_genes)
    return RankedPairs.from_unsorted(gene_i, gene_j, score, support)


def _difference(positive: RankedPairs, negative: RankedPairs, n_genes: int) -> RankedPairs:
    keys = np.concatenate([positive.gene_i * n_genes + positive.gene_j, negative.gene_i * n_genes + negative.gene_j])
    signed = np.concatenate([positive.score, -negative.score])
    support = np.concatenate([positive.support, negative.support])
    canonical, inverse = np.unique(keys, return_inverse=True)
    gene_i, gene_j = np.divmod(canonical, n_genes)
    return RankedPairs.from_unsorted(
        gene_i,
        gene_j,
        np.bincount(inverse, weights=signed, minlength=canonical.size),
        np.bincount(inverse, weights=support, minlength=canonical.size),
    )


def _empty_ranking() -> RankedPairs:
    return RankedPairs(gene_i=[], gene_j=[], score=[], support=[])


def aggregate_stream(
    dataset: Dataset,
    maps: Iterable[Tuple[int, AttentionMap]],
    mode: AggregationMode = AggregationMode.ALL,
    weights: Optional[np.ndarray] = None,
) -> RankedPairs:
    """Like `aggregate`, for (dataset position, map) pairs in any order."""
    mode = AggregationMode(mode)
    if mode != AggregationMode.ALL and not dataset.has_labels:
        raise LabelsRequiredError(f"mode '{mode.value}' needs cell labels")
    labels = dataset.label_array() if dataset.has_labels else None
    positive, negative = InteractionAccumulator(dataset.n_genes), InteractionAccumulator(dataset.n_genes)

    for pos, attention in maps:
        weight = 1.0 if weights is None else float(weights[pos])
        if mode == AggregationMode.ALL or labels[pos] == POSITIVE:
            positive.add(attention, weight)
        elif mode == AggregationMode.CONTRASTIVE and labels[pos] == NEGATIVE:
            negative.add(attention, weight)

    logger.info(f"Aggregated {positive.n_cells + negative.n_cells} cells in mode '{mode.value}'")
    if mode != AggregationMode.CONTRASTIVE:
        return finalize(positive)

    sides = []
    for name, acc in (("positive", positive), ("negative", negative)):
        if len(acc) == 0:
            logger.warning(f"⚠️  No {name} cells with off-diagonal attention; treating that side as zero")
            sides.append(_empty_ranking())
        else:
            sides.append(finalize(acc))
    if not len(sides[0]) and not len(sides[1]):
        raise EmptyInputError("neither label group produced any attention pairs")
    return _difference(sides[0], sides[1], dataset.n_genes)


def aggregate(
    dataset: Dataset,
    maps: Sequence[AttentionMap],
    mode: AggregationMode = AggregationMode.ALL,
    weights: Optional[np.ndarray] = None,
) -> RankedPairs:
    """Rank pairs from maps aligned with the dataset's cells.

    all: every cell; positive: label-1 cells; contrastive: finalized positive
    scores minus finalized negative scores, a missing side counting as 0.
    """
    if len(maps) != dataset.n_cells:
        raise ValueError(f"{len(maps)} attention maps for {dataset.n_cells} cells")
    return aggregate_stream(dataset, enumerate(maps), mode, weights)


def subset_weights(dataset: Dataset, subset: SampledSubset) -> np.ndarray:
    """I(x) per dataset position, rescaled so the largest is 1 (the estimator is scale-free)."""
    if dataset.cell_ids != subset.cell_ids:
        raise ConfigMismatchError("dataset cells must be the sampled subset, in subset order")
    weights = subset.weights
    if weights.size == 0 or weights.sum() <= 0:
        raise EmptyInputError("weighted estimate needs a non-empty subset with positive weight")
    return weights / weights.max()


def estimated_interaction(
    dataset: Dataset,
    maps: Sequence[AttentionMap],
    subset: SampledSubset,
    mode: AggregationMode = AggregationMode.ALL,
) -> RankedPairs:
    """Sum_x Z_x I(x) / Sum_x I(x) over the sampled cells."""
    return aggregate(dataset, maps, mode, subset_weights(dataset, subset))


def correlation_matrix(levels: np.ndarray, method: CorrelationMethod) -> np.ndarray:
    if method == CorrelationMethod.SPEARMAN:
        levels = stats.rankdata(levels, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(levels, rowvar=False)
    return np.nan_to_num(np.atleast_2d(corr), nan=0.0)


def baseline_correlation_rank(
    dataset: Dataset, method: CorrelationMethod = CorrelationMethod.PEARSON, min_cells: int = 10
) -> RankedPairs:
    """corr_positive(i, j) - corr_negative(i, j) over genes expressed in >= min_cells cells of each group."""
    if not dataset.has_labels:
        raise LabelsRequiredError("the correlation baseline needs cell labels")
    method = CorrelationMethod(method)
    labels = dataset.label_array()
    matrix = dataset.csr()
    pos, neg = matrix[labels == POSITIVE], matrix[labels == NEGATIVE]
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise EmptyInputError("both label groups need at least one cell")

    genes = np.flatnonzero((pos.getnnz(axis=0) >= min_cells) & (neg.getnnz(axis=0) >= min_cells))
    skipped = int(np.count_nonzero(matrix.getnnz(axis=0))) - genes.size
    if skipped:
        logger.warning(f"⚠️  Skipping {skipped} genes expressed in fewer than {min_cells} cells of a group")
    if genes.size < 2:
        raise EmptyInputError(f"fewer than two genes are expressed in {min_cells}+ cells of both groups")

    diff = correlation_matrix(pos[:, genes].toarray(), method) - correlation_matrix(neg[:, genes].toarray(), method)
    expressed = (matrix[:, genes] > 0).astype(np.float64)
    co_expressed = (expressed.T @ expressed).toarray()
    upper_i, upper_j = np.triu_indices(genes.size, k=1)
    logger.info(f"{method.value} baseline over {genes.size} genes ({upper_i.size} pairs)")
    return RankedPairs.from_unsorted(
        genes[upper_i], genes[upper_j], diff[upper_i, upper_j], co_expressed[upper_i, upper_j]
    )


def save_checkpoint(acc: InteractionAccumulator, path: str):
    """Header `ZM1 V n_cells weight_total`, then one `i j z m` line per key."""
    keys, z, m = acc.totals()
    i, j = np.divmod(keys, acc.n_genes)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{CHECKPOINT_MAGIC} {acc.n_genes} {acc.n_cells} {acc.weight_total!r}\n")
        f.writelines(f"{a} {b} {zv!r} {mv!r}\n" for a, b, zv, mv in zip(i.tolist(), j.tolist(), z.tolist(), m.tolist()))
    logger.info(f"Accumulator checkpoint ({keys.size} keys) saved to {path}")


def load_checkpoint(path: str) -> InteractionAccumulator:
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != CHECKPOINT_MAGIC:
            raise ParseError(f"{path} is not an accumulator checkpoint", 1)
        try:
            acc = InteractionAccumulator(int(header[1]))
            acc.n_cells, acc.weight_total = int(header[2]), float(header[3])
        except ValueError as e:
            raise ParseError(f"bad checkpoint header: {e}", 1) from None
        rest = f.read()
    if not rest.strip():
        return acc
    try:
        body = np.loadtxt(io.StringIO(rest), ndmin=2)
    except ValueError as e:
        raise ParseError(f"bad checkpoint line: {e}") from None
    if body.shape[1] != 4:
        raise ParseError("checkpoint lines must be `i j z m`")
    i, j = body[:, 0].astype(np.int64), body[:, 1].astype(np.int64)
    if np.any(i == j) or np.any(body[:, 3] <= 0) or max(i.max(), j.max()) >= acc.n_genes or min(i.min(), j.min()) < 0:
        raise ParseError("checkpoint holds diagonal, out-of-range or zero-weight keys")
    acc._pending.append((i * acc.n_genes + j, body[:, 2].copy(), body[:, 3].copy()))
    acc._consolidate()
    return acc


def write_ranked_pairs(ranked: RankedPairs, out: TextIO, symbols: Optional[dict] = None):
    """`gene_i gene_j score support` TSV, plus symbol columns when symbols are known."""
    for i, j, score, support in zip(
        ranked.gene_i.tolist(), ranked.gene_j.tolist(), ranked.score.tolist(), ranked.support.tolist()
    ):
        line = f"{i}\t{j}\t{score!r}\t{support!r}"
        if symbols:
            line += f"\t{symbols.get(i, '')}\t{symbols.get(j, '')}"
        out.write(line + "\n")


def read_ranked_pairs(stream: TextIO) -> RankedPairs:
    try:
        table = pd.read_csv(stream, sep="\t", header=None, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return _empty_ranking()
    if table.shape[1] not in (4, 6):
        raise ParseError("ranked pair lines must have 4 or 6 tab-separated columns")
    try:
        return RankedPairs(
            gene_i=table[0].astype(np.int64).to_numpy(),
            gene_j=table[1].astype(np.int64).to_numpy(),
            score=table[2].astype(np.float64).to_numpy(),
            support=table[3].astype(np.float64).to_numpy(),
        )
    except ValueError as e:
        raise ParseError(f"invalid ranked pairs: {e}") from None

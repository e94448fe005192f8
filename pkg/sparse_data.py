"""
Sparse cell data: triplet-file ingestion, normalization and the exact
Min-Max similarity / density oracles.
"""

from typing import Dict, Optional, TextIO
import logging

import numba as nb
import numpy as np
import pandas as pd

from errors import ConfigMismatchError, ParseError
from models import CellVector, Dataset, DiversityScores, NEGATIVE, POSITIVE

logger = logging.getLogger(__name__)

DEFAULT_TOTAL_SCALE = 10_000.0
COMMENT = "%"


def _read_header(stream: TextIO):
    line_no = 0
    for raw in stream:
        line_no += 1
        line = raw.strip()
        if not line or line.startswith(COMMENT):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ParseError("header must be `n_cells n_genes nnz`", line_no)
        try:
            n_cells, n_genes, nnz = (int(field) for field in fields)
        except ValueError:
            raise ParseError(f"header fields must be integers, got {line!r}", line_no) from None
        if n_cells <= 0 or n_genes <= 0 or nnz <= 0:
            raise ParseError("header counts must be positive", line_no)
        return n_cells, n_genes, nnz
    raise ParseError("expression file is empty")


def _read_triplets(stream: TextIO) -> pd.DataFrame:
    try:
        return pd.read_csv(
            stream,
            sep=r"\s+",
            header=None,
            comment=COMMENT,
            names=["cell_id", "gene", "level"],
            dtype={"cell_id": str, "gene": np.int64, "level": np.float64},
            engine="c",
        )
    except pd.errors.EmptyDataError:
        raise ParseError("expression file has a header but no triplets") from None
    except (ValueError, pd.errors.ParserError) as e:
        raise ParseError(f"malformed triplet: {e}") from None


def parse_labels(stream: TextIO) -> Dict[str, int]:
    try:
        table = pd.read_csv(stream, sep="\t", header=None, names=["cell_id", "label"], dtype=str)
    except pd.errors.EmptyDataError:
        return {}
    if table.isna().any().any():
        raise ParseError("labels file lines must be `cell_id<TAB>label`")
    labels = {}
    for cell_id, label in zip(table["cell_id"], table["label"]):
        label = label.strip()
        if label not in ("0", "1"):
            raise ParseError(f"label for {cell_id} must be 0 or 1, got {label!r}")
        labels[cell_id] = POSITIVE if label == "1" else NEGATIVE
    return labels


def parse_symbols(stream: TextIO, n_genes: Optional[int] = None) -> Dict[int, str]:
    try:
        table = pd.read_csv(stream, sep="\t", header=None, names=["gene", "symbol"], dtype=str)
    except pd.errors.EmptyDataError:
        return {}
    if table.isna().any().any():
        raise ParseError("symbols file lines must be `gene_index<TAB>symbol`")
    symbols = {}
    for gene, symbol in zip(table["gene"], table["symbol"]):
        try:
            index = int(gene)
        except ValueError:
            raise ParseError(f"gene index must be an integer, got {gene!r}") from None
        if index < 0 or (n_genes is not None and index >= n_genes):
            raise ParseError(f"gene index {index} out of range for {n_genes} genes")
        symbols[index] = symbol.strip()
    return symbols


def parse_triplet_file(
    expr_stream: TextIO,
    labels_stream: Optional[TextIO] = None,
    symbols_stream: Optional[TextIO] = None,
) -> Dataset:
    """Build a Dataset from a triplet expression file (plus optional labels and symbols).

    Cells appear in order of their first triplet; entries are sorted by gene index.
    """
    n_cells, n_genes, nnz = _read_header(expr_stream)
    table = _read_triplets(expr_stream)
    if table.isna().any().any():
        raise ParseError("every triplet needs `cell_id gene_index level`")
    if len(table) != nnz:
        raise ParseError(f"header announces {nnz} triplets, found {len(table)}")

    genes = table["gene"].to_numpy(dtype=np.int64)
    levels = table["level"].to_numpy(dtype=np.float64)
    bad = np.flatnonzero((genes < 0) | (genes >= n_genes))
    if bad.size:
        row = table.iloc[bad[0]]
        raise ParseError(f"gene index {row.gene} of cell {row.cell_id} is outside [0, {n_genes})")
    bad = np.flatnonzero(~(levels > 0))
    if bad.size:
        row = table.iloc[bad[0]]
        raise ParseError(f"level {row.level} of cell {row.cell_id} gene {row.gene} must be positive")

    codes, cell_ids = pd.factorize(table["cell_id"], sort=False)
    if len(cell_ids) != n_cells:
        raise ParseError(f"header announces {n_cells} cells, found {len(cell_ids)}")

    order = np.lexsort((genes, codes))
    keys = codes[order].astype(np.int64) * n_genes + genes[order]
    dup = np.flatnonzero(np.diff(keys) == 0)
    if dup.size:
        key = int(keys[dup[0]])
        raise ParseError(f"duplicate entry for cell {cell_ids[key // n_genes]} gene {key % n_genes}")

    indptr = np.concatenate([[0], np.cumsum(np.bincount(codes, minlength=n_cells))])
    ids = [str(cell_id) for cell_id in cell_ids]

    labels = None
    if labels_stream is not None:
        all_labels = parse_labels(labels_stream)
        missing = [cell_id for cell_id in ids if cell_id not in all_labels]
        if missing:
            raise ParseError(f"label missing for {len(missing)} cells, e.g. {missing[0]}")
        extra = len(all_labels) - len(ids)
        if extra > 0:
            logger.warning(f"Ignoring {extra} labels for cells not in the expression file")
        labels = {cell_id: all_labels[cell_id] for cell_id in ids}

    symbols = parse_symbols(symbols_stream, n_genes) if symbols_stream is not None else None

    dataset = Dataset(
        n_genes=n_genes,
        cell_ids=ids,
        indptr=indptr,
        indices=genes[order],
        levels=levels[order],
        labels=labels,
        gene_symbols=symbols,
    )
    logger.info(f"Parsed {dataset.n_cells} cells x {n_genes} genes ({dataset.nnz} entries)")
    return dataset


def load_dataset(expr_path: str, labels_path: Optional[str] = None, symbols_path: Optional[str] = None) -> Dataset:
    with open(expr_path, encoding="utf-8") as expr:
        labels = open(labels_path, encoding="utf-8") if labels_path else None
        symbols = open(symbols_path, encoding="utf-8") if symbols_path else None
        try:
            return parse_triplet_file(expr, labels, symbols)
        finally:
            for stream in (labels, symbols):
                if stream is not None:
                    stream.close()


def write_triplet_file(dataset: Dataset, stream: TextIO):
    """Inverse of parse_triplet_file; levels are written with round-trip precision."""
    stream.write(f"{dataset.n_cells} {dataset.n_genes} {dataset.nnz}\n")
    for cell in dataset.cells():
        stream.writelines(
            f"{cell.cell_id} {gene} {level!r}\n" for gene, level in zip(cell.indices.tolist(), cell.levels.tolist())
        )


def write_labels(labels: Dict[str, int], stream: TextIO):
    stream.writelines(f"{cell_id}\t{label}\n" for cell_id, label in labels.items())


def write_symbols(symbols: Dict[int, str], stream: TextIO):
    stream.writelines(f"{gene}\t{symbol}\n" for gene, symbol in sorted(symbols.items()))


def normalize_cell(cell: CellVector, total_scale: float = DEFAULT_TOTAL_SCALE) -> CellVector:
    """log(1 + v / sum(v) * total_scale) on every level; the support is unchanged."""
    if total_scale <= 0:
        raise ValueError("total_scale must be positive")
    levels = np.log1p(cell.levels / cell.levels.sum() * total_scale)
    return CellVector(cell_id=cell.cell_id, indices=cell.indices, levels=levels)


def normalize_dataset(dataset: Dataset, total_scale: float = DEFAULT_TOTAL_SCALE) -> Dataset:
    if total_scale <= 0:
        raise ValueError("total_scale must be positive")
    totals = np.add.reduceat(dataset.levels, dataset.indptr[:-1])
    per_entry = np.repeat(totals, np.diff(dataset.indptr))
    logger.info(f"Normalizing {dataset.n_cells} cells to total scale {total_scale:g}")
    return dataset.with_levels(np.log1p(dataset.levels / per_entry * total_scale))


@nb.njit(cache=True)
def _min_max_merge(idx_a, val_a, idx_b, val_b):
    p = 0
    q = 0
    num = 0.0
    den = 0.0
    while p < idx_a.shape[0] and q < idx_b.shape[0]:
        if idx_a[p] == idx_b[q]:
            a = val_a[p]
            b = val_b[q]
            if a < b:
                num += a
                den += b
            else:
                num += b
                den += a
            p += 1
            q += 1
        elif idx_a[p] < idx_b[q]:
            den += val_a[p]
            p += 1
        else:
            den += val_b[q]
            q += 1
    while p < idx_a.shape[0]:
        den += val_a[p]
        p += 1
    while q < idx_b.shape[0]:
        den += val_b[q]
        q += 1
    return num / den


@nb.njit(cache=True)
def _density_of(q_idx, q_val, indptr, indices, levels):
    total = 0.0
    for c in range(indptr.shape[0] - 1):
        lo = indptr[c]
        hi = indptr[c + 1]
        total += _min_max_merge(q_idx, q_val, indices[lo:hi], levels[lo:hi])
    return total


@nb.njit(parallel=True, cache=True)
def _density_all(indptr, indices, levels):
    n_cells = indptr.shape[0] - 1
    out = np.empty(n_cells)
    for c in nb.prange(n_cells):
        lo = indptr[c]
        hi = indptr[c + 1]
        out[c] = _density_of(indices[lo:hi], levels[lo:hi], indptr, indices, levels)
    return out


def min_max_similarity(x: CellVector, y: CellVector) -> float:
    """sum(min(x_i, y_i)) / sum(max(x_i, y_i)) by a merge of the two sorted supports."""
    return float(_min_max_merge(x.indices, x.levels, y.indices, y.levels))


def exact_density(dataset: Dataset, q: CellVector) -> float:
    """Sum of Min-Max similarities between q and every cell (self term included)."""
    if q.indices[-1] >= dataset.n_genes:
        raise ConfigMismatchError(f"query cell {q.cell_id} indexes genes beyond V={dataset.n_genes}")
    return float(_density_of(q.indices, q.levels, dataset.indptr, dataset.indices, dataset.levels))


def exact_density_all(dataset: Dataset) -> DiversityScores:
    """Brute-force densities for every cell, O(n^2 nnz)."""
    logger.info(f"Computing exact Min-Max densities for {dataset.n_cells} cells")
    densities = _density_all(dataset.indptr, dataset.indices, dataset.levels)
    return DiversityScores(cell_ids=list(dataset.cell_ids), densities=densities)

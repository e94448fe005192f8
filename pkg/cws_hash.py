"""
0-bit consistent weighted sampling (CWS) hash family.

Per-dimension CWS parameters are never materialized: they are regenerated on
demand from a counter-based generator keyed on (seed, row, gene), so memory
stays independent of the vocabulary size and the number of rows.
"""

from typing import Tuple
import logging

import numba as nb
import numpy as np

from models import CellVector, Dataset, HashFamilyConfig

logger = logging.getLogger(__name__)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_REHASH_SALT = np.uint64(0xD6E8FEB86659FD93)
_SHIFT_30 = np.uint64(30)
_SHIFT_27 = np.uint64(27)
_SHIFT_31 = np.uint64(31)
_SHIFT_11 = np.uint64(11)
_SHIFT_32 = np.uint64(32)
_LOW_32 = np.uint64(0xFFFFFFFF)
_INV_2_32 = 1.0 / 4294967296.0
_INV_2_53 = 1.0 / 9007199254740992.0


@nb.njit(cache=True)
def _mix64(x):
    # splitmix64 finalizer; all operands uint64, arithmetic wraps
    z = x + _GOLDEN
    z = (z ^ (z >> _SHIFT_30)) * _MIX_A
    z = (z ^ (z >> _SHIFT_27)) * _MIX_B
    return z ^ (z >> _SHIFT_31)


@nb.njit(cache=True)
def _gene_key(seed, gene):
    return _mix64(_mix64(np.uint64(seed)) ^ np.uint64(gene))


@nb.njit(cache=True)
def _row_key(gene_key, row):
    return _mix64(gene_key ^ np.uint64(row))


@nb.njit(cache=True)
def _key(seed, row, gene):
    return _row_key(_gene_key(seed, gene), row)


@nb.njit(cache=True)
def _open_pair(key, stream):
    """Two uniform draws in (0, 1) from the halves of one 64-bit output."""
    z = _mix64(key ^ (np.uint64(stream + 1) * _GOLDEN))
    hi = np.float64(z >> _SHIFT_32)
    lo = np.float64(z & _LOW_32)
    return (hi + 0.5) * _INV_2_32, (lo + 0.5) * _INV_2_32


@nb.njit(cache=True)
def _half_open_unit(key, stream):
    """Uniform draw in [0, 1)."""
    z = _mix64(key ^ (np.uint64(stream + 1) * _GOLDEN))
    return np.float64(z >> _SHIFT_11) * _INV_2_53


@nb.njit(cache=True)
def _params_from_key(key):
    # Gamma(2, 1) as -log of a product of two uniforms
    u0, u1 = _open_pair(key, 0)
    u2, u3 = _open_pair(key, 1)
    return -np.log(u0 * u1), -np.log(u2 * u3), _half_open_unit(key, 2)


@nb.njit(cache=True)
def _params(seed, row, gene):
    return _params_from_key(_key(seed, row, gene))


@nb.njit(cache=True)
def _log_a(key, log_level):
    r, c, beta = _params_from_key(key)
    t = np.floor(log_level / r + beta)
    return np.log(c) - r * (t - beta + 1.0)


@nb.njit(cache=True)
def _rehash(seed, row, gene, n_buckets):
    z = _mix64(_mix64(_mix64(np.uint64(seed) ^ _REHASH_SALT) ^ np.uint64(row)) ^ np.uint64(gene))
    return np.int64(z % np.uint64(n_buckets))


@nb.njit(cache=True)
def _hash_entries(indices, log_levels, seed, row, n_buckets):
    best = np.inf
    best_gene = indices[0]
    for p in range(indices.shape[0]):
        ln_a = _log_a(_key(seed, row, indices[p]), log_levels[p])
        if ln_a < best:
            best = ln_a
            best_gene = indices[p]
    return _rehash(seed, row, best_gene, n_buckets)


@nb.njit(cache=True)
def _hash_one(indices, levels, seed, row, n_buckets):
    return _hash_entries(indices, np.log(levels), seed, row, n_buckets)


@nb.njit(cache=True)
def _hash_cell_rows(indices, log_levels, seed, n_buckets, out):
    # entries outer, rows inner: the gene key is mixed once per entry
    n_rows = out.shape[0]
    best = np.full(n_rows, np.inf)
    best_gene = np.full(n_rows, indices[0])
    for p in range(indices.shape[0]):
        gene_key = _gene_key(seed, indices[p])
        for row in range(n_rows):
            ln_a = _log_a(_row_key(gene_key, row), log_levels[p])
            if ln_a < best[row]:
                best[row] = ln_a
                best_gene[row] = indices[p]
    for row in range(n_rows):
        out[row] = _rehash(seed, row, best_gene[row], n_buckets)


@nb.njit(parallel=True, cache=True)
def _hash_block(indptr, indices, levels, seed, n_rows, n_buckets):
    n_cells = indptr.shape[0] - 1
    codes = np.empty((n_cells, n_rows), dtype=np.int64)
    for c in nb.prange(n_cells):
        lo = indptr[c]
        hi = indptr[c + 1]
        _hash_cell_rows(indices[lo:hi], np.log(levels[lo:hi]), seed, n_buckets, codes[c])
    return codes


def cws_params(seed: int, row: int, gene: int) -> Tuple[float, float, float]:
    """(r_i, c_i, beta_i) for one key: two Gamma(2, 1) draws and one Uniform[0, 1)."""
    r, c, beta = _params(np.uint64(seed), np.uint64(row), np.uint64(gene))
    return float(r), float(c), float(beta)


def hash_cell(x: CellVector, config: HashFamilyConfig, row: int) -> int:
    """Bucket in [0, B) of the 0-bit CWS argmin index of x under hash row `row`."""
    return int(
        _hash_one(x.indices, x.levels, np.uint64(config.seed), np.int64(row), np.int64(config.n_buckets))
    )


def hash_rows(x: CellVector, config: HashFamilyConfig) -> np.ndarray:
    """Buckets of x for every row 0..R-1."""
    indptr = np.array([0, x.nnz], dtype=np.int64)
    return hash_matrix(indptr, x.indices, x.levels, config)[0]


def hash_matrix(indptr: np.ndarray, indices: np.ndarray, levels: np.ndarray, config: HashFamilyConfig) -> np.ndarray:
    """(n_cells, R) bucket codes for a block of CSR rows."""
    return _hash_block(
        np.asarray(indptr, dtype=np.int64),
        np.asarray(indices, dtype=np.int64),
        np.asarray(levels, dtype=np.float64),
        np.uint64(config.seed),
        config.n_rows,
        config.n_buckets,
    )


def hash_dataset_block(dataset: Dataset, start: int, stop: int, config: HashFamilyConfig) -> np.ndarray:
    """Bucket codes for cells [start, stop) of a dataset."""
    lo, hi = dataset.indptr[start], dataset.indptr[stop]
    indptr = dataset.indptr[start:stop + 1] - lo
    return hash_matrix(indptr, dataset.indices[lo:hi], dataset.levels[lo:hi], config)

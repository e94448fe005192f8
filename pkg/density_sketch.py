"""
Two-pass Min-Max density estimation with an R x B counter array.

Pass 1 hashes every cell once per row and increments one counter per row;
pass 2 re-hashes each cell and averages the counters it lands on. Memory is
the counter array plus one fixed-size block of bucket codes.
"""

from functools import reduce
from typing import Tuple
import logging
import struct

import numba as nb
import numpy as np
from joblib import Parallel, delayed

from cws_hash import hash_dataset_block, hash_matrix, hash_rows
from errors import ConfigMismatchError, CounterOverflowError, EmptyInputError, ParseError
from models import CellVector, Dataset, DiversityScores, HashFamilyConfig, RaceSketch

logger = logging.getLogger(__name__)

MAGIC = "RACE1"
BINARY_SUFFIX = ".bin"
BLOCK_CELLS = 4096
COUNTER_LIMIT = np.iinfo(np.uint32).max
_LIMIT = np.uint32(COUNTER_LIMIT)


@nb.njit(cache=True, nogil=True)
def _accumulate(counts, codes):
    for c in range(codes.shape[0]):
        for row in range(codes.shape[1]):
            bucket = codes[c, row]
            if counts[row, bucket] == _LIMIT:
                return False
            counts[row, bucket] += 1
    return True


@nb.njit(parallel=True, cache=True, nogil=True)
def _lookup(counts, codes):
    n_cells = codes.shape[0]
    n_rows = codes.shape[1]
    out = np.empty(n_cells)
    for c in nb.prange(n_cells):
        total = np.int64(0)
        for row in range(n_rows):
            total += np.int64(counts[row, codes[c, row]])
        out[c] = total / n_rows
    return out


def _build_counts(
    indptr: np.ndarray, indices: np.ndarray, levels: np.ndarray, config: HashFamilyConfig, block_size: int
) -> np.ndarray:
    counts = np.zeros((config.n_rows, config.n_buckets), dtype=np.uint32)
    n_cells = indptr.size - 1
    for start in range(0, n_cells, block_size):
        stop = min(start + block_size, n_cells)
        lo, hi = indptr[start], indptr[stop]
        codes = hash_matrix(indptr[start:stop + 1] - lo, indices[lo:hi], levels[lo:hi], config)
        if not _accumulate(counts, codes):
            raise CounterOverflowError(f"a counter exceeded {COUNTER_LIMIT} while adding cells {start}..{stop}")
        logger.debug(f"Pass 1: hashed cells {start}..{stop} of {n_cells}")
    return counts


def _freeze(counts: np.ndarray, config: HashFamilyConfig, n_items: int) -> RaceSketch:
    counts.flags.writeable = False
    return RaceSketch(counts=counts, config=config, n_items=n_items)


def build(dataset: Dataset, config: HashFamilyConfig, block_size: int = BLOCK_CELLS) -> RaceSketch:
    """Pass 1: one linear scan, one increment per (cell, row)."""
    if dataset.n_cells == 0:
        raise EmptyInputError("cannot build a sketch from an empty dataset")
    counts = _build_counts(dataset.indptr, dataset.indices, dataset.levels, config, block_size)
    logger.info(
        f"Built {config.n_rows}x{config.n_buckets} sketch over {dataset.n_cells} cells "
        f"({counts.nbytes / 1e6:.1f} MB of counters)"
    )
    return _freeze(counts, config, dataset.n_cells)


def _shard_bounds(n_cells: int, n_shards: int):
    edges = np.linspace(0, n_cells, n_shards + 1).astype(np.int64)
    return [(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]


def _shard_sketch(indptr, indices, levels, config: HashFamilyConfig, block_size: int) -> RaceSketch:
    # one numba thread per shard; n_jobs=1 runs shards in this process
    previous = nb.get_num_threads()
    nb.set_num_threads(1)
    try:
        counts = _build_counts(indptr, indices, levels, config, block_size)
    finally:
        nb.set_num_threads(previous)
    return _freeze(counts, config, indptr.size - 1)


def build_sharded(
    dataset: Dataset, config: HashFamilyConfig, n_shards: int, n_jobs: int = 1, block_size: int = BLOCK_CELLS
) -> RaceSketch:
    """Pass 1 over contiguous shards built in parallel and merged.

    Counter increments are exchangeable, so the result equals `build` exactly.
    """
    if dataset.n_cells == 0:
        raise EmptyInputError("cannot build a sketch from an empty dataset")

    jobs = []
    for lo, hi in _shard_bounds(dataset.n_cells, n_shards):
        base, top = dataset.indptr[lo], dataset.indptr[hi]
        jobs.append(
            delayed(_shard_sketch)(
                dataset.indptr[lo:hi + 1] - base,
                np.array(dataset.indices[base:top]),
                np.array(dataset.levels[base:top]),
                config,
                block_size,
            )
        )
    # separate processes: numba's parallel kernels must not be launched from concurrent threads
    shards = Parallel(n_jobs=n_jobs)(jobs)
    logger.info(f"Merging {len(shards)} shard sketches")
    return reduce(merge, shards)


def merge(a: RaceSketch, b: RaceSketch) -> RaceSketch:
    """Elementwise counter sum of two sketches with identical configurations."""
    if a.config != b.config:
        raise ConfigMismatchError(f"cannot merge sketches with configs {a.config} and {b.config}")
    total = a.counts.astype(np.uint64) + b.counts.astype(np.uint64)
    if total.size and total.max() > COUNTER_LIMIT:
        raise CounterOverflowError("merged counters exceed the 32-bit range")
    return _freeze(total.astype(np.uint32), a.config, a.n_items + b.n_items)


def query(sketch: RaceSketch, x: CellVector) -> float:
    """Pass 2 for one cell: the mean of the counters x hashes to."""
    codes = hash_rows(x, sketch.config)
    return float(_lookup(sketch.counts, codes[np.newaxis, :])[0])


def query_all(sketch: RaceSketch, dataset: Dataset, block_size: int = BLOCK_CELLS) -> DiversityScores:
    densities = np.empty(dataset.n_cells)
    for start in range(0, dataset.n_cells, block_size):
        stop = min(start + block_size, dataset.n_cells)
        codes = hash_dataset_block(dataset, start, stop, sketch.config)
        densities[start:stop] = _lookup(sketch.counts, codes)
    return DiversityScores(cell_ids=list(dataset.cell_ids), densities=densities)


def estimate_all(dataset: Dataset, config: HashFamilyConfig, block_size: int = BLOCK_CELLS) -> DiversityScores:
    """Both passes: estimated Min-Max density of every cell."""
    sketch = build(dataset, config, block_size)
    scores = query_all(sketch, dataset, block_size)
    logger.info(
        f"Estimated densities for {dataset.n_cells} cells "
        f"(min {scores.densities.min():.2f}, max {scores.densities.max():.2f})"
    )
    return scores


def bias_corrected(w, n_items: int, n_buckets: int):
    """Undo the 1/B rehash-collision floor: E[w] = K + (n - K) / B."""
    return (np.asarray(w, dtype=np.float64) - n_items / n_buckets) / (1.0 - 1.0 / n_buckets)


def _header(sketch: RaceSketch) -> str:
    c = sketch.config
    return f"{MAGIC} {c.seed} {c.n_rows} {c.n_buckets} {sketch.n_items}"


def _parse_header(line: str) -> Tuple[HashFamilyConfig, int]:
    fields = line.split()
    if len(fields) != 5 or fields[0] != MAGIC:
        raise ParseError(f"not a sketch header: {line.strip()!r}")
    try:
        seed, n_rows, n_buckets, n_items = (int(field) for field in fields[1:])
    except ValueError:
        raise ParseError(f"sketch header fields must be integers: {line.strip()!r}") from None
    return HashFamilyConfig(seed=seed, n_rows=n_rows, n_buckets=n_buckets), n_items


def save_sketch(sketch: RaceSketch, path: str):
    """Text format unless `path` ends in .bin (length-prefixed header + raw counters)."""
    if path.endswith(BINARY_SUFFIX):
        header = _header(sketch).encode("ascii")
        with open(path, "wb") as f:
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(sketch.counts.astype("<u4").tobytes())
    else:
        with open(path, "w", encoding="utf-8") as f:
            f.write(_header(sketch) + "\n")
            np.savetxt(f, sketch.counts, fmt="%d", delimiter=" ")
    logger.info(f"Sketch saved to {path}")


def load_sketch(path: str) -> RaceSketch:
    if path.endswith(BINARY_SUFFIX):
        with open(path, "rb") as f:
            (length,) = struct.unpack("<I", f.read(4))
            config, n_items = _parse_header(f.read(length).decode("ascii"))
            counts = np.frombuffer(f.read(), dtype="<u4")
        expected = config.n_rows * config.n_buckets
        if counts.size != expected:
            raise ParseError(f"sketch body has {counts.size} counters, header implies {expected}")
        counts = counts.reshape(config.n_rows, config.n_buckets).astype(np.uint32)
    else:
        with open(path, encoding="utf-8") as f:
            config, n_items = _parse_header(f.readline())
            body = np.loadtxt(f, dtype=np.int64, ndmin=2)
        if body.shape != (config.n_rows, config.n_buckets):
            raise ParseError(f"sketch body is {body.shape}, header implies {(config.n_rows, config.n_buckets)}")
        if body.min() < 0 or body.max() > COUNTER_LIMIT:
            raise ParseError("sketch counters must be 32-bit unsigned integers")
        counts = body.astype(np.uint32)
    try:
        return _freeze(counts, config, n_items)
    except ValueError as e:
        raise ParseError(f"inconsistent sketch file {path}: {e}") from None


def write_scores(scores: DiversityScores, stream):
    """Densities TSV: `cell_id<TAB>density`."""
    stream.writelines(f"{cell_id}\t{w!r}\n" for cell_id, w in zip(scores.cell_ids, scores.densities.tolist()))


def read_scores(stream) -> DiversityScores:
    cell_ids, densities = [], []
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 2:
            raise ParseError("density lines must be `cell_id<TAB>density`", line_no)
        try:
            densities.append(float(fields[1]))
        except ValueError:
            raise ParseError(f"density must be a number, got {fields[1]!r}", line_no) from None
        cell_ids.append(fields[0])
    return DiversityScores(cell_ids=cell_ids, densities=densities)

"""
Pre-ranked enrichment scoring of a gene-pair ranking against known interactions.

The running sum steps up by 1/N_h at every ranked pair found in the ground
truth and down by 1/(N - N_h) at every other pair; ES is its signed extreme.
NES divides ES by the mean same-sign ES of uniformly shuffled hit positions.
"""

from typing import Dict, List, Optional, TextIO, Tuple
import logging

import numpy as np
from joblib import Parallel, delayed

from errors import DegenerateRankingError, ParseError
from models import EnrichmentResult, GroundTruthSet, RankedPairs

logger = logging.getLogger(__name__)

MIN_PERMUTATIONS = 100
PERMUTATION_CHUNK = 250


def hit_mask(ranked: RankedPairs, gt: GroundTruthSet) -> np.ndarray:
    """True where the ranked pair is a ground-truth pair."""
    if not gt.pairs or len(ranked) == 0:
        return np.zeros(len(ranked), dtype=bool)
    truth = np.array(sorted(gt.pairs), dtype=np.int64)
    width = int(max(ranked.gene_j.max(), truth.max())) + 1
    return np.isin(ranked.gene_i * width + ranked.gene_j, truth[:, 0] * width + truth[:, 1])


def _check_counts(n_hits: int, n_total: int):
    if n_hits == 0:
        raise DegenerateRankingError("no ranked pair is in the ground truth")
    if n_hits == n_total:
        raise DegenerateRankingError("every ranked pair is in the ground truth")


def running_sum(mask: np.ndarray) -> np.ndarray:
    """The full trajectory, one value per ranked position."""
    mask = np.asarray(mask, dtype=bool)
    n_hits = int(mask.sum())
    _check_counts(n_hits, mask.size)
    hits = np.cumsum(mask)
    misses = np.cumsum(~mask)
    return hits / n_hits - misses / (mask.size - n_hits)


def extreme(trajectory_max: float, trajectory_min: float) -> float:
    """Signed maximum-magnitude deviation; a tie goes to the positive side."""
    return trajectory_max if trajectory_max >= -trajectory_min else trajectory_min


def es_from_positions(positions: np.ndarray, n_total: int) -> float:
    """ES from sorted 0-based hit positions in O(N_h).

    The trajectory peaks right after a hit and bottoms out right before one
    (or at the end, where it is 0).
    """
    n_hits = positions.size
    n_miss = n_total - n_hits
    k = np.arange(1, n_hits + 1)
    misses = positions - k + 1
    peak = np.max(k / n_hits - misses / n_miss)
    trough = min(np.min((k - 1) / n_hits - misses / n_miss), 0.0)
    return float(extreme(peak, trough))


def enrichment_score(ranked: RankedPairs, gt: GroundTruthSet) -> float:
    mask = hit_mask(ranked, gt)
    _check_counts(int(mask.sum()), mask.size)
    return es_from_positions(np.flatnonzero(mask), mask.size)


def _null_chunk(seed: int, first: int, last: int, n_total: int, n_hits: int) -> np.ndarray:
    out = np.empty(last - first)
    for p in range(first, last):
        rng = np.random.default_rng([seed, p])
        positions = np.sort(rng.choice(n_total, size=n_hits, replace=False))
        out[p - first] = es_from_positions(positions, n_total)
    return out


def null_distribution(n_total: int, n_hits: int, n_perm: int, seed: int, n_jobs: int = 1) -> np.ndarray:
    """ES of n_perm uniformly shuffled rankings; permutation p draws from stream (seed, p)."""
    bounds = list(range(0, n_perm, PERMUTATION_CHUNK)) + [n_perm]
    chunks = Parallel(n_jobs=n_jobs)(
        delayed(_null_chunk)(seed, lo, hi, n_total, n_hits) for lo, hi in zip(bounds[:-1], bounds[1:])
    )
    return np.concatenate(chunks)


def nes(ranked: RankedPairs, gt: GroundTruthSet, n_perm: int = 1000, seed: int = 0, n_jobs: int = 1) -> EnrichmentResult:
    if n_perm < MIN_PERMUTATIONS:
        raise ValueError(f"n_perm must be at least {MIN_PERMUTATIONS}")
    mask = hit_mask(ranked, gt)
    n_hits, n_total = int(mask.sum()), mask.size
    _check_counts(n_hits, n_total)
    es = es_from_positions(np.flatnonzero(mask), n_total)

    null = null_distribution(n_total, n_hits, n_perm, seed, n_jobs)
    same_sign = null[null >= 0] if es >= 0 else null[null < 0]
    fallback = same_sign.size == 0
    if fallback:
        logger.warning("⚠️  No permutation ES shares the sign of ES; normalizing by the mean |ES| of all permutations")
        scale = float(np.mean(np.abs(null)))
        p_value = float(np.mean(np.abs(null) >= abs(es)))
    else:
        scale = float(np.mean(np.abs(same_sign)))
        p_value = float(np.mean(np.abs(same_sign) >= abs(es)))

    result = EnrichmentResult(
        es=es,
        nes=es / scale,
        n_hits=n_hits,
        n_total=n_total,
        n_permutations=n_perm,
        seed=seed,
        p_value=p_value,
        null_fallback=fallback,
    )
    logger.info(f"ES={result.es:.4f} NES={result.nes:.4f} p={result.p_value:.4g} ({n_hits}/{n_total} hits)")
    return result


def _canonical(a: int, b: int) -> Tuple[int, int]:
    return (a, b) if a < b else (b, a)


def parse_ground_truth(
    stream: TextIO, symbol_map: Optional[Dict[int, str]] = None, n_genes: Optional[int] = None
) -> GroundTruthSet:
    """Two-column TSV of gene pairs, as integer indices or as symbols (auto-detected)."""
    rows: List[Tuple[int, str, str]] = []
    for line_no, line in enumerate(stream, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 2 or not all(field.strip() for field in fields):
            raise ParseError("ground-truth lines must be `gene_a<TAB>gene_b`", line_no)
        rows.append((line_no, fields[0].strip(), fields[1].strip()))

    by_index = all(a.lstrip("-").isdigit() and b.lstrip("-").isdigit() for _, a, b in rows)
    if by_index:
        def lookup(token: str) -> Optional[int]:
            index = int(token)
            return index if index >= 0 and (n_genes is None or index < n_genes) else None
    else:
        if symbol_map is None:
            raise ParseError("ground truth uses gene symbols but no symbol map was given")
        index_of = {symbol: gene for gene, symbol in symbol_map.items()}

        def lookup(token: str) -> Optional[int]:
            return index_of.get(token)

    pairs, n_self, n_unknown = set(), 0, 0
    for _, a, b in rows:
        i, j = lookup(a), lookup(b)
        if i is None or j is None:
            n_unknown += 1
        elif i == j:
            n_self += 1
        else:
            pairs.add(_canonical(i, j))
    if n_unknown:
        logger.warning(f"⚠️  Skipped {n_unknown} ground-truth pairs with unknown genes")
    if n_self:
        logger.info(f"Skipped {n_self} self-pairs in the ground truth")
    logger.info(f"Ground truth: {len(pairs)} distinct pairs")
    return GroundTruthSet(pairs=pairs, n_self_skipped=n_self, n_unknown_skipped=n_unknown)


def write_result(result: EnrichmentResult, out: TextIO):
    """Single line: es nes n_hits n_total n_perm seed."""
    out.write(
        f"{result.es!r}\t{result.nes!r}\t{result.n_hits}\t{result.n_total}\t{result.n_permutations}\t{result.seed}\n"
    )

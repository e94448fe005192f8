from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator
from typing import Dict, Iterator, List, Optional, Set, Tuple
from enum import Enum
import numpy as np
import scipy.sparse as sp

from errors import ConfigMismatchError
from seeding import derive_seed

POSITIVE = 1
NEGATIVE = 0


class AggregationMode(str, Enum):
    ALL = "all"
    POSITIVE_ONLY = "positive"
    CONTRASTIVE = "contrastive"


class CorrelationMethod(str, Enum):
    PEARSON = "pearson"
    SPEARMAN = "spearman"


class ArrayModel(BaseModel):
    """Base for models that carry numpy arrays."""
    model_config = ConfigDict(arbitrary_types_allowed=True)


def _int_array(value) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(value, dtype=np.int64))


def _float_array(value) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(value, dtype=np.float64))


class CellVector(ArrayModel):
    """One sparse observation: sorted gene indices with positive levels."""
    cell_id: str
    indices: np.ndarray
    levels: np.ndarray

    @field_validator("indices", mode="before")
    @classmethod
    def _coerce_indices(cls, value):
        return _int_array(value)

    @field_validator("levels", mode="before")
    @classmethod
    def _coerce_levels(cls, value):
        return _float_array(value)

    @model_validator(mode="after")
    def _check_entries(self):
        if self.indices.ndim != 1 or self.indices.shape != self.levels.shape:
            raise ValueError(f"cell {self.cell_id}: indices and levels must be 1-d and of equal length")
        if self.indices.size == 0:
            raise ValueError(f"cell {self.cell_id} has no expressed genes")
        if self.indices[0] < 0 or np.any(np.diff(self.indices) <= 0):
            raise ValueError(f"cell {self.cell_id}: gene indices must be non-negative, sorted and unique")
        if not np.all(self.levels > 0):
            raise ValueError(f"cell {self.cell_id}: levels must be strictly positive")
        return self

    @classmethod
    def from_entries(cls, cell_id: str, entries: List[Tuple[int, float]]) -> "CellVector":
        ordered = sorted(entries, key=lambda entry: entry[0])
        return cls(
            cell_id=cell_id,
            indices=[gene for gene, _ in ordered],
            levels=[level for _, level in ordered],
        )

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def entries(self) -> List[Tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.levels.tolist()))

    def scaled(self, factor: float) -> "CellVector":
        return CellVector(cell_id=self.cell_id, indices=self.indices, levels=self.levels * factor)


class Dataset(ArrayModel):
    """A cell-by-gene dataset stored as CSR rows, one row per cell.

    Immutable after construction: the arrays are flagged read-only.
    """
    n_genes: int = Field(gt=0)
    cell_ids: List[str]
    indptr: np.ndarray
    indices: np.ndarray
    levels: np.ndarray
    labels: Optional[Dict[str, int]] = None
    gene_symbols: Optional[Dict[int, str]] = None

    _positions: Dict[str, int] = PrivateAttr(default_factory=dict)

    @field_validator("indptr", "indices", mode="before")
    @classmethod
    def _coerce_ints(cls, value):
        return _int_array(value)

    @field_validator("levels", mode="before")
    @classmethod
    def _coerce_levels(cls, value):
        return _float_array(value)

    @model_validator(mode="after")
    def _check_structure(self):
        n_cells = len(self.cell_ids)
        if self.indptr.shape != (n_cells + 1,) or self.indptr[0] != 0:
            raise ValueError("indptr must have n_cells + 1 entries starting at 0")
        if self.indptr[-1] != self.indices.size or self.indices.shape != self.levels.shape:
            raise ValueError("indptr, indices and levels disagree on the number of entries")
        if np.any(np.diff(self.indptr) <= 0):
            raise ValueError("every cell must express at least one gene")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n_genes):
            raise ValueError(f"gene indices must lie in [0, {self.n_genes})")
        if not np.all(self.levels > 0):
            raise ValueError("levels must be strictly positive")
        within_row = np.ones(max(self.indices.size - 1, 0), dtype=bool)
        within_row[self.indptr[1:-1] - 1] = False
        if np.any(np.diff(self.indices)[within_row] <= 0):
            raise ValueError("gene indices must be sorted and unique within each cell")

        self._positions = {cell_id: pos for pos, cell_id in enumerate(self.cell_ids)}
        if len(self._positions) != n_cells:
            raise ValueError("cell ids must be unique")
        if self.labels is not None:
            missing = [cell_id for cell_id in self.cell_ids if cell_id not in self.labels]
            if missing:
                raise ValueError(f"{len(missing)} cells have no label, e.g. {missing[0]}")
            if any(label not in (POSITIVE, NEGATIVE) for label in self.labels.values()):
                raise ValueError("labels must be 0 or 1")

        for array in (self.indptr, self.indices, self.levels):
            array.flags.writeable = False
        return self

    @classmethod
    def from_cells(
        cls,
        cells: List[CellVector],
        n_genes: int,
        labels: Optional[Dict[str, int]] = None,
        gene_symbols: Optional[Dict[int, str]] = None,
    ) -> "Dataset":
        sizes = [cell.nnz for cell in cells]
        indptr = np.concatenate([[0], np.cumsum(sizes)]) if cells else np.zeros(1, dtype=np.int64)
        return cls(
            n_genes=n_genes,
            cell_ids=[cell.cell_id for cell in cells],
            indptr=indptr,
            indices=np.concatenate([cell.indices for cell in cells]) if cells else [],
            levels=np.concatenate([cell.levels for cell in cells]) if cells else [],
            labels=labels,
            gene_symbols=gene_symbols,
        )

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def position(self, cell_id: str) -> int:
        return self._positions[cell_id]

    def cell(self, pos: int) -> CellVector:
        lo, hi = self.indptr[pos], self.indptr[pos + 1]
        # rows were validated as a whole; skip per-cell validation
        return CellVector.model_construct(
            cell_id=self.cell_ids[pos], indices=self.indices[lo:hi], levels=self.levels[lo:hi]
        )

    def cells(self) -> Iterator[CellVector]:
        for pos in range(self.n_cells):
            yield self.cell(pos)

    def label_array(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return np.array([self.labels[cell_id] for cell_id in self.cell_ids], dtype=np.int8)

    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (np.array(self.levels), np.array(self.indices), np.array(self.indptr)),
            shape=(self.n_cells, self.n_genes),
        )

    def subset(self, cell_ids: List[str]) -> "Dataset":
        """Restriction to `cell_ids`, in the given order."""
        unknown = [cell_id for cell_id in cell_ids if cell_id not in self._positions]
        if unknown:
            raise ConfigMismatchError(f"{len(unknown)} subset cells are not in the dataset, e.g. {unknown[0]}")
        positions = [self._positions[cell_id] for cell_id in cell_ids]
        cells = [self.cell(pos) for pos in positions]
        labels = None
        if self.labels is not None:
            labels = {cell_id: self.labels[cell_id] for cell_id in cell_ids}
        return Dataset.from_cells(cells, self.n_genes, labels, self.gene_symbols)

    def with_levels(self, levels: np.ndarray) -> "Dataset":
        return Dataset(
            n_genes=self.n_genes,
            cell_ids=list(self.cell_ids),
            indptr=self.indptr,
            indices=self.indices,
            levels=levels,
            labels=self.labels,
            gene_symbols=self.gene_symbols,
        )

    def with_labels(self, labels: Optional[Dict[str, int]]) -> "Dataset":
        return Dataset(
            n_genes=self.n_genes,
            cell_ids=list(self.cell_ids),
            indptr=self.indptr,
            indices=self.indices,
            levels=self.levels,
            labels=labels,
            gene_symbols=self.gene_symbols,
        )

    def same_as(self, other: "Dataset") -> bool:
        return (
            self.n_genes == other.n_genes
            and self.cell_ids == other.cell_ids
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.levels, other.levels)
            and self.labels == other.labels
            and self.gene_symbols == other.gene_symbols
        )


class HashFamilyConfig(BaseModel):
    seed: int = Field(ge=0, lt=2**64)
    n_rows: int = Field(default=100, ge=1)
    n_buckets: int = Field(default=10_000, ge=2)


class RaceSketch(ArrayModel):
    """R x B counter array; every row sums to n_items."""
    counts: np.ndarray
    config: HashFamilyConfig
    n_items: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_counts(self):
        expected = (self.config.n_rows, self.config.n_buckets)
        if self.counts.shape != expected or self.counts.dtype != np.uint32:
            raise ValueError(f"counts must be a uint32 array of shape {expected}")
        if np.any(self.counts.sum(axis=1, dtype=np.int64) != self.n_items):
            raise ValueError("every counter row must sum to n_items")
        return self

    @classmethod
    def empty(cls, config: HashFamilyConfig) -> "RaceSketch":
        return cls(counts=np.zeros((config.n_rows, config.n_buckets), dtype=np.uint32), config=config, n_items=0)


class DiversityScores(ArrayModel):
    cell_ids: List[str]
    densities: np.ndarray

    @field_validator("densities", mode="before")
    @classmethod
    def _coerce(cls, value):
        return _float_array(value)

    @model_validator(mode="after")
    def _check(self):
        if self.densities.shape != (len(self.cell_ids),):
            raise ValueError("one density per cell id required")
        if np.any(self.densities < 0):
            raise ValueError("densities must be non-negative")
        return self

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.cell_ids, self.densities.tolist()))


class SamplingPlan(ArrayModel):
    cell_ids: List[str]
    probabilities: np.ndarray
    seed: int = Field(ge=0, lt=2**64)

    @field_validator("probabilities", mode="before")
    @classmethod
    def _coerce(cls, value):
        return _float_array(value)

    @model_validator(mode="after")
    def _check(self):
        if self.probabilities.shape != (len(self.cell_ids),) or not self.cell_ids:
            raise ValueError("one probability per cell id required")
        if not np.all(self.probabilities > 0):
            raise ValueError("every sampling probability must be positive")
        if abs(float(self.probabilities.sum()) - 1.0) > 1e-9:
            raise ValueError("sampling probabilities must sum to 1")
        return self

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.cell_ids, self.probabilities.tolist()))


class SampledSubset(BaseModel):
    members: List[Tuple[str, float]]
    target_k: int = Field(ge=0)
    population: int = Field(ge=0)

    @model_validator(mode="after")
    def _check(self):
        if len({cell_id for cell_id, _ in self.members}) != len(self.members):
            raise ValueError("subset members must be unique")
        if len(self.members) != min(self.target_k, self.population):
            raise ValueError("subset size must equal min(target_k, population)")
        return self

    @property
    def cell_ids(self) -> List[str]:
        return [cell_id for cell_id, _ in self.members]

    @property
    def weights(self) -> np.ndarray:
        return np.array([weight for _, weight in self.members], dtype=np.float64)


class ModelConfig(BaseModel):
    n_genes: int = Field(gt=0)
    d_model: int = Field(default=32, gt=0)
    n_layers: int = Field(default=2, gt=0)
    n_heads: int = Field(default=4, gt=0)
    d_ff: int = Field(default=64, gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_heads(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def full_scale(cls, n_genes: int, seed: int = 0) -> "ModelConfig":
        return cls(n_genes=n_genes, d_model=128, n_layers=4, n_heads=8, d_ff=512, seed=seed)


class AttentionMap(ArrayModel):
    """Layer- and head-averaged attention over one cell's expressed genes."""
    gene_indices: np.ndarray
    values: np.ndarray

    @field_validator("gene_indices", mode="before")
    @classmethod
    def _coerce_genes(cls, value):
        return _int_array(value)

    @field_validator("values", mode="before")
    @classmethod
    def _coerce_values(cls, value):
        return _float_array(value)

    @model_validator(mode="after")
    def _check_stochastic(self):
        m = self.gene_indices.size
        if self.values.shape != (m, m):
            raise ValueError(f"attention map must be {m}x{m}")
        if np.any(self.values < -1e-12) or np.any(self.values > 1 + 1e-12):
            raise ValueError("attention values must lie in [0, 1]")
        if m and np.max(np.abs(self.values.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("attention rows must sum to 1")
        return self

    @property
    def m(self) -> int:
        return int(self.gene_indices.size)


class RankedPairs(ArrayModel):
    """Canonical gene pairs (i < j), descending by score, ties by (i, j)."""
    gene_i: np.ndarray
    gene_j: np.ndarray
    score: np.ndarray
    support: np.ndarray

    @field_validator("gene_i", "gene_j", mode="before")
    @classmethod
    def _coerce_genes(cls, value):
        return _int_array(value)

    @field_validator("score", "support", mode="before")
    @classmethod
    def _coerce_scores(cls, value):
        return _float_array(value)

    @model_validator(mode="after")
    def _check_order(self):
        n = self.gene_i.size
        if any(array.shape != (n,) for array in (self.gene_j, self.score, self.support)):
            raise ValueError("ranked pair columns must have equal length")
        if np.any(self.gene_i >= self.gene_j):
            raise ValueError("pairs must be canonical (i < j)")
        if n > 1:
            drop = np.diff(self.score)
            if np.any(drop > 0):
                raise ValueError("scores must be in descending order")
            tied = drop == 0
            later_i, later_j = self.gene_i[1:][tied], self.gene_j[1:][tied]
            earlier_i, earlier_j = self.gene_i[:-1][tied], self.gene_j[:-1][tied]
            if np.any((later_i < earlier_i) | ((later_i == earlier_i) & (later_j <= earlier_j))):
                raise ValueError("tied scores must be ordered by (i, j)")
        return self

    @classmethod
    def from_unsorted(cls, gene_i, gene_j, score, support) -> "RankedPairs":
        gene_i, gene_j = _int_array(gene_i), _int_array(gene_j)
        score, support = _float_array(score), _float_array(support)
        order = np.lexsort((gene_j, gene_i, -score))
        return cls(gene_i=gene_i[order], gene_j=gene_j[order], score=score[order], support=support[order])

    def __len__(self) -> int:
        return int(self.gene_i.size)

    def pairs(self) -> List[Tuple[int, int]]:
        return list(zip(self.gene_i.tolist(), self.gene_j.tolist()))

    def as_dict(self) -> Dict[Tuple[int, int], float]:
        return dict(zip(self.pairs(), self.score.tolist()))

    def top(self, k: int) -> "RankedPairs":
        return RankedPairs(gene_i=self.gene_i[:k], gene_j=self.gene_j[:k], score=self.score[:k], support=self.support[:k])


class GroundTruthSet(BaseModel):
    pairs: Set[Tuple[int, int]]
    n_self_skipped: int = 0
    n_unknown_skipped: int = 0

    @model_validator(mode="after")
    def _check_canonical(self):
        if any(i >= j for i, j in self.pairs):
            raise ValueError("ground-truth pairs must be canonical (i < j) and not self-pairs")
        return self


class EnrichmentResult(BaseModel):
    es: float = Field(ge=-1.0, le=1.0)
    nes: float
    n_hits: int = Field(ge=0)
    n_total: int = Field(ge=0)
    n_permutations: int = Field(ge=0)
    seed: int
    p_value: float = Field(default=1.0, ge=0.0, le=1.0)
    null_fallback: bool = False

    @model_validator(mode="after")
    def _check_counts(self):
        if self.n_hits > self.n_total:
            raise ValueError("n_hits cannot exceed n_total")
        return self


class RunConfig(BaseModel):
    """Resolved settings for one CLI command."""
    seed: int = Field(default=42, ge=0, lt=2**64)
    n_rows: int = Field(default=100, ge=1)
    n_buckets: int = Field(default=10_000, ge=2)
    sampling: bool = False
    sample_fraction: Optional[float] = None
    sample_k: Optional[int] = Field(default=None, ge=0)
    uniform: bool = False
    mode: AggregationMode = AggregationMode.ALL
    weighted_estimator: bool = False
    normalize: bool = False
    normalize_scale: float = Field(default=10_000.0, gt=0)
    weights_path: Optional[str] = None
    d_model: int = Field(default=32, gt=0)
    n_layers: int = Field(default=2, gt=0)
    n_heads: int = Field(default=4, gt=0)
    d_ff: int = Field(default=64, gt=0)
    batch_size: int = Field(default=32, gt=0)
    n_perm: int = Field(default=1000, ge=100)
    threads: int = Field(default=1, ge=1)
    method: CorrelationMethod = CorrelationMethod.PEARSON
    min_cells: int = Field(default=10, ge=1)
    expr_path: Optional[str] = None
    labels_path: Optional[str] = None
    symbols_path: Optional[str] = None
    ground_truth_path: Optional[str] = None
    sketch_path: Optional[str] = None
    subset_path: Optional[str] = None
    plan_path: Optional[str] = None
    plan_out_path: Optional[str] = None
    ranked_path: Optional[str] = None
    out_path: Optional[str] = None

    @model_validator(mode="after")
    def _check_sampling(self):
        if self.sample_fraction is not None and not 0 < self.sample_fraction <= 1:
            raise ValueError("sample fraction must lie in (0, 1]")
        if self.sampling and (self.sample_fraction is None) == (self.sample_k is None):
            raise ValueError("exactly one of --fraction / -k must be set when sampling")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by the number of heads")
        return self

    @property
    def hash_config(self) -> HashFamilyConfig:
        return HashFamilyConfig(seed=derive_seed(self.seed, "cws"), n_rows=self.n_rows, n_buckets=self.n_buckets)

    def encoder_config(self, n_genes: int) -> ModelConfig:
        return ModelConfig(
            n_genes=n_genes,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            seed=derive_seed(self.seed, "model"),
        )

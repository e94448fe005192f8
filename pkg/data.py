#!/usr/bin/env python3
"""
Synthetic single-cell data for tests, the bundled fixture and the sweeps.

Populations are built so the quantities the pipeline estimates are known:
planted gene pairs for interaction recovery, and near-duplicate vs diverse
cells for the density sampler.
"""

from typing import Dict, Optional, Tuple
import logging
import os

import numpy as np

from attention_toy import AttentionEncoder, save_weights
from interaction_aggregator import correlation_matrix
from models import CellVector, CorrelationMethod, Dataset, GroundTruthSet, ModelConfig, NEGATIVE, POSITIVE
from seeding import stream
from sparse_data import write_labels, write_symbols, write_triplet_file

logger = logging.getLogger(__name__)

FIXTURE_FILES = {
    "expr": "expression.txt",
    "labels": "labels.tsv",
    "symbols": "symbols.tsv",
    "ground_truth": "ground_truth.tsv",
    "weights": "weights.txt",
}


def _cell_id(pos: int) -> str:
    return f"cell_{pos:05d}"


def gene_symbols(n_genes: int) -> Dict[int, str]:
    return {gene: f"G{gene:05d}" for gene in range(n_genes)}


class SyntheticCellGenerator:
    """Seeded generators; every population draws from its own labeled stream."""

    def __init__(self, seed: int = 42):
        self.seed = seed

    def random_dataset(
        self,
        n_cells: int,
        n_genes: int,
        nnz_range: Tuple[int, int] = (20, 100),
        positive_fraction: Optional[float] = None,
    ) -> Dataset:
        """Cells with a uniform number of distinct random genes and log-normal levels."""
        lo, hi = nnz_range
        if not 1 <= lo <= hi <= n_genes:
            raise ValueError(f"nnz range {nnz_range} does not fit {n_genes} genes")
        rng = stream(self.seed, "random", n_cells, n_genes)
        cells = []
        for pos in range(n_cells):
            genes = np.sort(rng.choice(n_genes, size=int(rng.integers(lo, hi + 1)), replace=False))
            cells.append(CellVector(cell_id=_cell_id(pos), indices=genes, levels=rng.lognormal(0.0, 1.0, genes.size)))
        labels = None
        if positive_fraction is not None:
            draws = rng.random(n_cells) < positive_fraction
            labels = {cell.cell_id: POSITIVE if draw else NEGATIVE for cell, draw in zip(cells, draws)}
        return Dataset.from_cells(cells, n_genes, labels, gene_symbols(n_genes))

    def planted_interaction_dataset(
        self,
        n_cells: int = 200,
        n_genes: int = 200,
        n_pairs: int = 20,
        background_nnz: Tuple[int, int] = (10, 30),
        co_expression: float = 0.7,
        solo_expression: float = 0.35,
    ) -> Tuple[Dataset, GroundTruthSet]:
        """Half the cells are positive; in them each planted pair is expressed
        together (probability `co_expression`) at correlated high levels. In
        negative cells planted genes appear independently.
        """
        if 2 * n_pairs + background_nnz[1] > n_genes:
            raise ValueError("not enough genes for the planted pairs and the background")
        rng = stream(self.seed, "planted", n_cells, n_genes, n_pairs)
        planted = rng.permutation(n_genes)[:2 * n_pairs].reshape(n_pairs, 2)
        pairs = {(int(min(a, b)), int(max(a, b))) for a, b in planted}
        background_pool = np.setdiff1d(np.arange(n_genes), planted.ravel())
        positive = rng.permutation(n_cells) < n_cells // 2

        cells, labels = [], {}
        for pos in range(n_cells):
            n_background = int(rng.integers(background_nnz[0], background_nnz[1] + 1))
            genes = rng.choice(background_pool, size=n_background, replace=False)
            entries = dict(zip(genes.tolist(), rng.lognormal(0.0, 0.5, n_background).tolist()))
            for a, b in planted:
                if positive[pos]:
                    if rng.random() < co_expression:
                        shared = rng.lognormal(1.5, 0.5)
                        entries[int(a)] = shared * rng.lognormal(0.0, 0.1)
                        entries[int(b)] = shared * rng.lognormal(0.0, 0.1)
                else:
                    for gene in (a, b):
                        if rng.random() < solo_expression:
                            entries[int(gene)] = rng.lognormal(1.5, 0.5)
            cell = CellVector.from_entries(_cell_id(pos), list(entries.items()))
            cells.append(cell)
            labels[cell.cell_id] = POSITIVE if positive[pos] else NEGATIVE

        dataset = Dataset.from_cells(cells, n_genes, labels, gene_symbols(n_genes))
        logger.info(f"Planted {n_pairs} interacting pairs in {n_cells} cells over {n_genes} genes")
        return dataset, GroundTruthSet(pairs=pairs)

    def near_duplicate_population(
        self,
        n_cells: int = 1000,
        n_genes: int = 4000,
        diverse_fraction: float = 0.1,
        n_prototypes: int = 3,
        prototype_nnz: int = 30,
        diverse_nnz: int = 15,
    ) -> Tuple[Dataset, Dict[str, int]]:
        """Near-copies of a few prototype cells plus singleton diverse cells on
        private genes. Returns the dataset and the diverse-cluster id of every
        diverse cell; near-duplicates are absent from that map.
        """
        n_diverse = int(round(diverse_fraction * n_cells))
        if n_prototypes * prototype_nnz + n_diverse * diverse_nnz > n_genes:
            raise ValueError("not enough genes to keep diverse cells disjoint")
        rng = stream(self.seed, "near-duplicate", n_cells, n_genes)
        genes = rng.permutation(n_genes)
        prototypes = []
        for p in range(n_prototypes):
            support = np.sort(genes[p * prototype_nnz:(p + 1) * prototype_nnz])
            prototypes.append((support, rng.lognormal(1.0, 0.5, prototype_nnz)))
        private = genes[n_prototypes * prototype_nnz:]

        diverse_positions = set(rng.choice(n_cells, size=n_diverse, replace=False).tolist())
        cells, clusters = [], {}
        for pos in range(n_cells):
            cell_id = _cell_id(pos)
            if pos in diverse_positions:
                cluster = len(clusters)
                support = np.sort(private[cluster * diverse_nnz:(cluster + 1) * diverse_nnz])
                cells.append(CellVector(cell_id=cell_id, indices=support, levels=rng.lognormal(1.0, 0.5, diverse_nnz)))
                clusters[cell_id] = cluster
            else:
                support, levels = prototypes[int(rng.integers(n_prototypes))]
                cells.append(CellVector(cell_id=cell_id, indices=support, levels=levels * rng.lognormal(0.0, 0.05, support.size)))
        logger.info(f"Population: {n_cells - n_diverse} near-duplicates of {n_prototypes} prototypes, {n_diverse} diverse cells")
        return Dataset.from_cells(cells, n_genes), clusters


def coexpression_weights(
    dataset: Dataset,
    config: ModelConfig,
    threshold: float = 0.4,
    sharpness: float = 8.0,
) -> AttentionEncoder:
    """Encoder weights whose attention follows positive-vs-negative co-expression.

    The thresholded correlation contrast C is factored as E E^T from its
    leading non-negative eigenpairs, so genes that co-vary in positive cells
    share an embedding direction. Queries and keys are scaled identities,
    values, outputs and feed-forward layers are zero. Dense V x V; meant for
    synthetic vocabularies.
    """
    if not dataset.has_labels:
        raise ValueError("co-expression weights need labelled cells")
    if config.n_genes != dataset.n_genes:
        raise ValueError("model vocabulary must match the dataset")
    labels = dataset.label_array()
    matrix = dataset.csr()
    contrast = correlation_matrix(matrix[labels == POSITIVE].toarray(), CorrelationMethod.PEARSON) - correlation_matrix(
        matrix[labels == NEGATIVE].toarray(), CorrelationMethod.PEARSON
    )
    np.fill_diagonal(contrast, 0.0)
    contrast[np.abs(contrast) < threshold] = 0.0

    eigenvalues, eigenvectors = np.linalg.eigh(contrast)
    keep = np.argsort(eigenvalues)[::-1][:config.d_model]
    keep = keep[eigenvalues[keep] > 0]
    embedding = np.zeros((config.n_genes, config.d_model))
    embedding[:, :keep.size] = eigenvectors[:, keep] * np.sqrt(eigenvalues[keep])

    model = AttentionEncoder(config)
    d = config.d_model
    arrays = {}
    for name, tensor in model.state_dict().items():
        shape = tuple(tensor.shape)
        if name == "embedding.weight":
            arrays[name] = embedding
        elif ".norm" in name:
            arrays[name] = np.ones(shape) if name.endswith("weight") else np.zeros(shape)
        elif name.endswith("query.weight"):
            arrays[name] = np.eye(d) * sharpness / np.sqrt(config.head_dim)
        elif name.endswith("key.weight"):
            arrays[name] = np.eye(d)
        else:
            arrays[name] = np.zeros(shape)
    logger.info(f"Co-expression weights from {keep.size} contrast components")
    return AttentionEncoder.from_arrays(config, arrays)


def write_fixture(directory: str, seed: int = 42, n_cells: int = 200, n_genes: int = 200, n_pairs: int = 20) -> Dict[str, str]:
    """Expression, labels, symbols, ground truth (by symbol) and co-expression weights."""
    os.makedirs(directory, exist_ok=True)
    dataset, truth = SyntheticCellGenerator(seed).planted_interaction_dataset(n_cells, n_genes, n_pairs)
    paths = {key: os.path.join(directory, name) for key, name in FIXTURE_FILES.items()}
    with open(paths["expr"], "w", encoding="utf-8") as f:
        write_triplet_file(dataset, f)
    with open(paths["labels"], "w", encoding="utf-8") as f:
        write_labels(dataset.labels, f)
    with open(paths["symbols"], "w", encoding="utf-8") as f:
        write_symbols(dataset.gene_symbols, f)
    with open(paths["ground_truth"], "w", encoding="utf-8") as f:
        f.writelines(f"{dataset.gene_symbols[i]}\t{dataset.gene_symbols[j]}\n" for i, j in sorted(truth.pairs))
    save_weights(coexpression_weights(dataset, ModelConfig(n_genes=n_genes, seed=seed)), paths["weights"])
    logger.info(f"✅ Fixture written to {directory}")
    return paths


def shuffled_labels(dataset: Dataset, seed: int) -> Dataset:
    """Same cells with labels permuted; the control for planted-pair recovery."""
    labels = dataset.label_array()
    permuted = stream(seed, "shuffle-labels").permutation(labels)
    return dataset.with_labels({cell_id: int(label) for cell_id, label in zip(dataset.cell_ids, permuted)})


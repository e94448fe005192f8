import numpy as np
import pytest

from data import SyntheticCellGenerator, write_fixture
from models import AttentionMap, CellVector, HashFamilyConfig


def cell(cell_id, entries):
    return CellVector.from_entries(cell_id, entries)


def random_attention(genes, rng):
    """Row-stochastic map over `genes` with strictly positive entries."""
    logits = rng.normal(size=(len(genes), len(genes)))
    values = np.exp(logits)
    return AttentionMap(gene_indices=genes, values=values / values.sum(axis=1, keepdims=True))


@pytest.fixture(scope="session")
def random_cells():
    return SyntheticCellGenerator(seed=7).random_dataset(80, 300, (5, 40))


@pytest.fixture(scope="session")
def labelled_cells():
    return SyntheticCellGenerator(seed=8).random_dataset(60, 50, (5, 20), positive_fraction=0.5)


@pytest.fixture(scope="session")
def planted():
    return SyntheticCellGenerator(seed=11).planted_interaction_dataset(n_cells=160, n_genes=120, n_pairs=8)


@pytest.fixture
def hash_config():
    return HashFamilyConfig(seed=1234, n_rows=64, n_buckets=10_000)


@pytest.fixture(scope="session")
def fixture_paths(tmp_path_factory):
    return write_fixture(str(tmp_path_factory.mktemp("fixture")), seed=42, n_cells=100, n_genes=80, n_pairs=5)

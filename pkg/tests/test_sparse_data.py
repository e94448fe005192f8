import io
import math

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import cell
from errors import ConfigMismatchError, ParseError
from models import Dataset
from sparse_data import (
    exact_density,
    exact_density_all,
    min_max_similarity,
    normalize_cell,
    normalize_dataset,
    parse_triplet_file,
    write_labels,
    write_symbols,
    write_triplet_file,
)


def parse(text, labels=None, symbols=None):
    return parse_triplet_file(
        io.StringIO(text),
        io.StringIO(labels) if labels is not None else None,
        io.StringIO(symbols) if symbols is not None else None,
    )


def brute_min_max(x, y):
    a, b = dict(x.entries), dict(y.entries)
    genes = set(a) | set(b)
    return sum(min(a.get(g, 0.0), b.get(g, 0.0)) for g in genes) / sum(max(a.get(g, 0.0), b.get(g, 0.0)) for g in genes)


class TestTripletParsing:
    def test_direct_parse(self):
        dataset = parse("2 5 3\nc0 0 1.0\nc0 2 2.0\nc1 4 3.0\n")
        assert dataset.n_cells == 2
        assert dataset.n_genes == 5
        assert [c.nnz for c in dataset.cells()] == [2, 1]
        assert dataset.cell(0).entries == [(0, 1.0), (2, 2.0)]

    def test_entries_are_sorted_and_comments_skipped(self):
        dataset = parse("% generated\n1 10 3\nc0 7 1.5\n% mid-file comment\nc0 2 0.5\nc0 4 2.0\n")
        np.testing.assert_array_equal(dataset.cell(0).indices, [2, 4, 7])
        np.testing.assert_array_equal(dataset.cell(0).levels, [0.5, 2.0, 1.5])

    def test_cells_keep_first_appearance_order(self):
        dataset = parse("3 4 4\nz 0 1\na 1 1\nz 2 1\nm 3 1\n")
        assert dataset.cell_ids == ["z", "a", "m"]

    def test_duplicate_entry_rejected(self):
        with pytest.raises(ParseError, match="duplicate"):
            parse("1 5 2\nc0 1 1.0\nc0 1 2.0\n")

    def test_gene_out_of_range_rejected(self):
        with pytest.raises(ParseError, match="outside"):
            parse("1 5 1\nc0 5 1.0\n")

    @pytest.mark.parametrize("level", ["0", "-1.5"])
    def test_non_positive_level_rejected(self, level):
        with pytest.raises(ParseError, match="positive"):
            parse(f"1 5 1\nc0 1 {level}\n")

    def test_triplet_count_must_match_header(self):
        with pytest.raises(ParseError, match="announces 3 triplets"):
            parse("1 5 3\nc0 1 1.0\nc0 2 1.0\n")

    def test_cell_count_must_match_header(self):
        with pytest.raises(ParseError, match="announces 3 cells"):
            parse("3 5 2\nc0 1 1.0\nc1 2 1.0\n")

    def test_malformed_triplet(self):
        with pytest.raises(ParseError):
            parse("1 5 1\nc0 one 1.0\n")

    def test_empty_file(self):
        with pytest.raises(ParseError, match="empty"):
            parse("")

    def test_labels_and_symbols(self):
        dataset = parse("2 3 2\nc0 0 1.0\nc1 2 1.0\n", labels="c0\t1\nc1\t0\n", symbols="0\tTP53\n2\tAPOE\n")
        assert dataset.labels == {"c0": 1, "c1": 0}
        assert dataset.gene_symbols == {0: "TP53", 2: "APOE"}

    def test_missing_label_rejected(self):
        with pytest.raises(ParseError, match="label missing"):
            parse("2 3 2\nc0 0 1.0\nc1 2 1.0\n", labels="c0\t1\n")

    def test_bad_label_value_rejected(self):
        with pytest.raises(ParseError, match="0 or 1"):
            parse("1 3 1\nc0 0 1.0\n", labels="c0\t2\n")

    def test_symbol_index_out_of_range(self):
        with pytest.raises(ParseError, match="out of range"):
            parse("1 3 1\nc0 0 1.0\n", symbols="3\tX\n")

    def test_round_trip(self, labelled_cells):
        expr, labels, symbols = io.StringIO(), io.StringIO(), io.StringIO()
        write_triplet_file(labelled_cells, expr)
        write_labels(labelled_cells.labels, labels)
        write_symbols(labelled_cells.gene_symbols, symbols)
        again = parse(expr.getvalue(), labels.getvalue(), symbols.getvalue())
        assert again.same_as(labelled_cells)


class TestDatasetModel:
    def test_empty_cell_rejected(self):
        with pytest.raises(ValidationError):
            cell("c0", [])

    def test_unsorted_indices_rejected(self):
        with pytest.raises(ValidationError):
            Dataset(n_genes=5, cell_ids=["a"], indptr=[0, 2], indices=[3, 1], levels=[1.0, 1.0])

    def test_duplicate_cell_ids_rejected(self):
        x = cell("a", [(0, 1.0)])
        with pytest.raises(ValidationError, match="unique"):
            Dataset.from_cells([x, x], n_genes=3)

    def test_arrays_are_read_only(self, random_cells):
        with pytest.raises(ValueError):
            random_cells.levels[0] = 5.0

    def test_subset_keeps_order_labels_and_symbols(self, labelled_cells):
        ids = [labelled_cells.cell_ids[5], labelled_cells.cell_ids[2]]
        sub = labelled_cells.subset(ids)
        assert sub.cell_ids == ids
        assert sub.labels == {cell_id: labelled_cells.labels[cell_id] for cell_id in ids}
        assert sub.gene_symbols == labelled_cells.gene_symbols
        np.testing.assert_array_equal(sub.cell(0).levels, labelled_cells.cell(5).levels)

    def test_subset_rejects_unknown_cells(self, labelled_cells):
        with pytest.raises(ConfigMismatchError):
            labelled_cells.subset([labelled_cells.cell_ids[0], "not_a_cell"])


class TestNormalization:
    def test_direct_arithmetic(self):
        out = normalize_cell(cell("c", [(0, 4.0), (1, 6.0)]), total_scale=10)
        np.testing.assert_allclose(out.levels, [math.log(5), math.log(7)])
        np.testing.assert_array_equal(out.indices, [0, 1])

    def test_single_entry(self):
        out = normalize_cell(cell("c", [(3, 17.0)]), total_scale=250)
        assert out.levels[0] == pytest.approx(math.log1p(250))

    def test_dataset_matches_per_cell(self, random_cells):
        normalized = normalize_dataset(random_cells, 1000)
        for pos in (0, 17, 79):
            np.testing.assert_allclose(normalized.cell(pos).levels, normalize_cell(random_cells.cell(pos), 1000).levels)

    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            normalize_cell(cell("c", [(0, 1.0)]), total_scale=0)


class TestMinMaxSimilarity:
    def test_identity(self):
        x = cell("x", [(0, 1.0), (4, 2.5)])
        assert min_max_similarity(x, x) == 1.0

    def test_disjoint(self):
        assert min_max_similarity(cell("x", [(0, 1.0)]), cell("y", [(1, 1.0)])) == 0.0

    def test_direct_evaluation(self):
        x = cell("x", [(0, 1.0), (1, 2.0)])
        y = cell("y", [(0, 2.0), (1, 1.0)])
        assert min_max_similarity(x, y) == pytest.approx(0.5)

    def test_symmetric_bounded_and_scale_free(self, random_cells):
        cells = list(random_cells.cells())
        for x, y in zip(cells[:-1], cells[1:]):
            s = min_max_similarity(x, y)
            assert 0.0 <= s <= 1.0
            assert s == min_max_similarity(y, x)
            assert s == pytest.approx(brute_min_max(x, y), abs=1e-12)
            assert min_max_similarity(x.scaled(3.0), y.scaled(3.0)) == pytest.approx(s, abs=1e-12)


class TestExactDensity:
    def test_single_cell(self):
        x = cell("q", [(1, 2.0), (3, 1.0)])
        assert exact_density(Dataset.from_cells([x], 5), x) == 1.0

    def test_copies(self):
        copies = [cell(f"q{i}", [(1, 2.0), (3, 1.0)]) for i in range(7)]
        assert exact_density(Dataset.from_cells(copies, 5), copies[0]) == pytest.approx(7.0)

    def test_matches_double_loop(self, random_cells):
        cells = list(random_cells.cells())[:50]
        subset = Dataset.from_cells(cells, random_cells.n_genes)
        scores = exact_density_all(subset)
        expected = [sum(brute_min_max(q, x) for x in cells) for q in cells]
        np.testing.assert_allclose(scores.densities, expected, rtol=1e-12)
        assert np.all(scores.densities >= 1.0)

    def test_query_beyond_vocabulary(self):
        dataset = Dataset.from_cells([cell("a", [(0, 1.0)])], 2)
        with pytest.raises(ConfigMismatchError):
            exact_density(dataset, cell("q", [(5, 1.0)]))

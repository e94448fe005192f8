import io

import numpy as np
import pytest

from enrichment_eval import (
    enrichment_score,
    es_from_positions,
    extreme,
    hit_mask,
    nes,
    null_distribution,
    parse_ground_truth,
    running_sum,
    write_result,
)
from errors import DegenerateRankingError, ParseError
from models import GroundTruthSet, RankedPairs


def ranking(n):
    """n canonical pairs (p, p + 1) with strictly decreasing scores."""
    return RankedPairs(
        gene_i=np.arange(n), gene_j=np.arange(n) + 1, score=np.linspace(1.0, 0.0, n), support=np.ones(n)
    )


def truth_at(positions):
    return GroundTruthSet(pairs={(int(p), int(p) + 1) for p in positions})


def oracle_es(mask):
    trajectory = running_sum(mask)
    return extreme(trajectory.max(), trajectory.min())


def mask_of(n, positions):
    mask = np.zeros(n, dtype=bool)
    mask[list(positions)] = True
    return mask


class TestEnrichmentScore:
    def test_hits_on_top(self):
        assert enrichment_score(ranking(20), truth_at(range(4))) == 1.0

    def test_hits_at_bottom(self):
        assert enrichment_score(ranking(20), truth_at(range(16, 20))) == -1.0

    def test_hand_rolled_trajectory(self):
        mask = mask_of(10, [0, 5])
        expected = [0.5, 0.375, 0.25, 0.125, 0.0, 0.5, 0.375, 0.25, 0.125, 0.0]
        np.testing.assert_allclose(running_sum(mask), expected, atol=1e-15)
        assert enrichment_score(ranking(10), truth_at([0, 5])) == 0.5

    def test_streaming_equals_running_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 200))
            n_hits = int(rng.integers(1, n))
            positions = np.sort(rng.choice(n, size=n_hits, replace=False))
            assert es_from_positions(positions, n) == oracle_es(mask_of(n, positions))

    def test_reversal_flips_sign(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(10, 100))
            mask = rng.random(n) < 0.2
            if mask.sum() in (0, n):
                continue
            trajectory = running_sum(mask)
            if np.isclose(trajectory.max(), -trajectory.min()):
                continue
            assert oracle_es(mask[::-1]) == pytest.approx(-oracle_es(mask), abs=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(2, 50))
            positions = np.sort(rng.choice(n, size=int(rng.integers(1, n)), replace=False))
            assert -1.0 <= es_from_positions(positions, n) <= 1.0

    def test_no_hits(self):
        with pytest.raises(DegenerateRankingError):
            enrichment_score(ranking(10), GroundTruthSet(pairs={(50, 60)}))

    def test_all_hits(self):
        with pytest.raises(DegenerateRankingError):
            enrichment_score(ranking(5), truth_at(range(5)))

    def test_hit_mask_ignores_unranked_truth(self):
        mask = hit_mask(ranking(6), GroundTruthSet(pairs={(2, 3), (40, 41)}))
        assert mask.tolist() == [False, False, True, False, False, False]

    def test_tie_goes_positive(self):
        assert extreme(0.4, -0.4) == 0.4


class TestNes:
    def test_minimum_permutations(self):
        with pytest.raises(ValueError):
            nes(ranking(20), truth_at([0, 1]), n_perm=99)

    def test_deterministic(self):
        ranked, gt = ranking(300), truth_at([3, 17, 40, 222])
        assert nes(ranked, gt, n_perm=200, seed=5) == nes(ranked, gt, n_perm=200, seed=5)

    def test_parallel_matches_serial(self):
        np.testing.assert_array_equal(
            null_distribution(500, 10, 600, seed=3, n_jobs=1), null_distribution(500, 10, 600, seed=3, n_jobs=2)
        )

    def test_null_draws_are_per_permutation(self):
        # permutation p only depends on (seed, p)
        np.testing.assert_array_equal(null_distribution(200, 5, 300, seed=8)[:100], null_distribution(200, 5, 100, seed=8))

    def test_result_fields(self):
        result = nes(ranking(400), truth_at(range(10)), n_perm=200, seed=1)
        assert result.es == 1.0
        assert result.nes > 1.0
        assert (result.n_hits, result.n_total, result.n_permutations, result.seed) == (10, 400, 200, 1)
        assert 0.0 <= result.p_value <= 1.0
        assert not result.null_fallback

    def test_negative_enrichment(self):
        result = nes(ranking(400), truth_at(range(390, 400)), n_perm=200, seed=1)
        assert result.es == -1.0
        assert result.nes < -1.0

    def test_planted_beats_shuffled(self):
        rng = np.random.default_rng(4)
        n = 2000
        for trial in range(10):
            planted = np.sort(rng.choice(n // 100, size=15, replace=False))
            shuffled = np.sort(rng.choice(n, size=15, replace=False))
            strong = nes(ranking(n), truth_at(planted), n_perm=200, seed=trial)
            control = nes(ranking(n), truth_at(shuffled), n_perm=200, seed=trial)
            assert strong.nes > control.nes

    def test_degenerate(self):
        with pytest.raises(DegenerateRankingError):
            nes(ranking(10), GroundTruthSet(pairs=set()), n_perm=100)


class TestGroundTruthParsing:
    symbols = {0: "TP53", 1: "MDM2", 2: "APOE", 3: "TREM2"}

    def parse(self, text, symbols=None, n_genes=None):
        return parse_ground_truth(io.StringIO(text), symbols, n_genes)

    def test_duplicates_collapse(self):
        gt = self.parse("TP53\tMDM2\nMDM2\tTP53\n", self.symbols)
        assert gt.pairs == {(0, 1)}

    def test_self_pair_skipped(self):
        gt = self.parse("APOE\tAPOE\nAPOE\tTREM2\n", self.symbols)
        assert gt.pairs == {(2, 3)}
        assert gt.n_self_skipped == 1

    def test_unknown_symbol_skipped(self):
        gt = self.parse("APOE\tBRCA1\nTREM2\tTP53\n", self.symbols)
        assert gt.pairs == {(0, 3)}
        assert gt.n_unknown_skipped == 1

    def test_integer_indices(self):
        gt = self.parse("# curated\n5\t2\n7\t9\n", n_genes=8)
        assert gt.pairs == {(2, 5)}
        assert gt.n_unknown_skipped == 1

    def test_symbols_need_a_map(self):
        with pytest.raises(ParseError):
            self.parse("TP53\tMDM2\n")

    def test_malformed_line(self):
        with pytest.raises(ParseError) as info:
            self.parse("TP53\tMDM2\nAPOE\n", self.symbols)
        assert info.value.line == 2


def test_write_result():
    result = nes(ranking(100), truth_at([0, 2, 9]), n_perm=100, seed=11)
    out = io.StringIO()
    write_result(result, out)
    fields = out.getvalue().rstrip("\n").split("\t")
    assert len(fields) == 6
    assert float(fields[0]) == result.es
    assert fields[2:] == ["3", "100", "100", "11"]


@pytest.mark.slow
class TestCalibration:
    def test_planted_top_percent(self):
        rng = np.random.default_rng(20)
        n, n_hits, wins = 10_000, 30, 0
        for trial in range(100):
            planted = np.sort(rng.choice(n // 100, size=n_hits, replace=False))
            shuffled = np.sort(rng.choice(n, size=n_hits, replace=False))
            strong = nes(ranking(n), truth_at(planted), n_perm=200, seed=trial)
            control = nes(ranking(n), truth_at(shuffled), n_perm=200, seed=trial)
            wins += strong.nes > control.nes
        assert wins >= 95

    def test_random_rankings_have_unit_nes(self):
        rng = np.random.default_rng(21)
        magnitudes = []
        for trial in range(200):
            positions = np.sort(rng.choice(1000, size=20, replace=False))
            magnitudes.append(abs(nes(ranking(1000), truth_at(positions), n_perm=500, seed=trial).nes))
        assert np.mean(magnitudes) == pytest.approx(1.0, abs=0.15)

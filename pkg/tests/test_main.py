import os

import pandas as pd
import pytest

from attention_toy import save_weights
from data import coexpression_weights, shuffled_labels
from main import main
from models import ModelConfig
from sparse_data import load_dataset


def read(path):
    with open(path, encoding="utf-8") as f:
        return f.read()


def run(*argv):
    assert main([str(arg) for arg in argv]) == 0


@pytest.fixture
def fx(fixture_paths):
    return fixture_paths


class TestSampling:
    def test_uniform_fraction(self, fx, tmp_path):
        out = tmp_path / "subset.tsv"
        run("sample", "--expr", fx["expr"], "--uniform", "--fraction", 0.1, "--out", out)
        lines = read(out).splitlines()
        assert len(lines) == 10
        assert len({line.split("\t")[0] for line in lines}) == 10

    def test_imd_k(self, fx, tmp_path):
        out = tmp_path / "subset.tsv"
        run("sample", "--expr", fx["expr"], "-k", 7, "--rows", 30, "--out", out)
        assert len(read(out).splitlines()) == 7

    def test_sampling_needs_a_size(self, fx, tmp_path):
        assert main(["sample", "--expr", fx["expr"], "--out", str(tmp_path / "x.tsv")]) == 1

    def test_config_file_then_flags(self, fx, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed=5\nuniform=yes\nfraction=0.1\n")
        via_file = tmp_path / "a.tsv"
        via_flags = tmp_path / "b.tsv"
        run("sample", "--config", cfg, "--seed", 6, "--expr", fx["expr"], "--out", via_file)
        run("sample", "--seed", 6, "--uniform", "--fraction", 0.1, "--expr", fx["expr"], "--out", via_flags)
        assert read(via_file) == read(via_flags)

    def test_saved_plan_gives_the_same_subset(self, fx, tmp_path):
        plan = tmp_path / "plan.tsv"
        run("sample", "--expr", fx["expr"], "--rows", 30, "-k", 12, "--plan-out", plan, "--out", tmp_path / "direct.tsv")
        assert len(read(plan).splitlines()) == 100
        run("sample", "--plan", plan, "-k", 12, "--out", tmp_path / "from_plan.tsv")
        assert read(tmp_path / "from_plan.tsv") == read(tmp_path / "direct.tsv")


class TestDensity:
    @pytest.mark.parametrize("name", ["sketch.txt", "sketch.bin"])
    def test_two_pass_composition(self, fx, tmp_path, name):
        sketch = tmp_path / name
        run("sketch", "--expr", fx["expr"], "--rows", 40, "--out", sketch)
        run("density", "--expr", fx["expr"], "--rows", 40, "--sketch", sketch, "--out", tmp_path / "from_sketch.tsv")
        run("density", "--expr", fx["expr"], "--rows", 40, "--out", tmp_path / "direct.tsv")
        assert read(tmp_path / "from_sketch.tsv") == read(tmp_path / "direct.tsv")
        assert len(read(tmp_path / "direct.tsv").splitlines()) == 100

    def test_threads_do_not_change_densities(self, fx, tmp_path):
        run("density", "--expr", fx["expr"], "--rows", 40, "--out", tmp_path / "one.tsv")
        run("density", "--expr", fx["expr"], "--rows", 40, "--threads", 2, "--out", tmp_path / "two.tsv")
        assert read(tmp_path / "one.tsv") == read(tmp_path / "two.tsv")

    def test_oracle(self, fx, tmp_path):
        run("oracle", "--expr", fx["expr"], "--out", tmp_path / "exact.tsv")
        densities = pd.read_csv(tmp_path / "exact.tsv", sep="\t", header=None)
        assert len(densities) == 100
        assert (densities[1] >= 1.0).all()


class TestDiscoverAndEval:
    def test_fraction_equals_sample_then_subset(self, fx, tmp_path):
        common = ["--expr", fx["expr"], "--symbols", fx["symbols"], "--weights", fx["weights"], "--rows", 30]
        run("discover", *common, "--fraction", 0.3, "--out", tmp_path / "direct.tsv")
        run("sample", "--expr", fx["expr"], "--rows", 30, "--fraction", 0.3, "--out", tmp_path / "subset.tsv")
        run("discover", *common, "--subset", tmp_path / "subset.tsv", "--out", tmp_path / "two_step.tsv")
        assert read(tmp_path / "direct.tsv") == read(tmp_path / "two_step.tsv")

    def test_weighted_estimator_needs_subset(self, fx, tmp_path):
        code = main(["discover", "--expr", fx["expr"], "--weighted-estimator", "--out", str(tmp_path / "r.tsv")])
        assert code == 1

    def test_discover_then_eval_is_deterministic(self, fx, tmp_path):
        ranked = tmp_path / "ranked.tsv"
        run("discover", "--expr", fx["expr"], "--labels", fx["labels"], "--symbols", fx["symbols"],
            "--weights", fx["weights"], "--mode", "positive", "--out", ranked)
        assert len(read(ranked).splitlines()[0].split("\t")) == 6
        for name in ("a.txt", "b.txt"):
            run("eval", "--ranked", ranked, "--ground-truth", fx["ground_truth"], "--symbols", fx["symbols"],
                "--n-perm", 200, "--out", tmp_path / name)
        assert read(tmp_path / "a.txt") == read(tmp_path / "b.txt")
        fields = read(tmp_path / "a.txt").split()
        assert len(fields) == 6
        assert float(fields[1]) > 0

    def test_baseline(self, fx, tmp_path):
        out = tmp_path / "baseline.tsv"
        run("baseline", "--expr", fx["expr"], "--labels", fx["labels"], "--method", "spearman", "--min-cells", 5, "--out", out)
        table = pd.read_csv(out, sep="\t", header=None)
        assert (table[0] < table[1]).all()
        assert table[2].is_monotonic_decreasing

    def test_sweep(self, fx, tmp_path):
        out = tmp_path / "sweep.tsv"
        run("sweep", "--expr", fx["expr"], "--labels", fx["labels"], "--symbols", fx["symbols"],
            "--ground-truth", fx["ground_truth"], "--weights", fx["weights"], "--fractions", "0.5",
            "--rows-list", "10", "--repeats", 1, "--n-perm", 100, "--out", out)
        assert len(pd.read_csv(out, sep="\t")) == 2


class TestErrors:
    def test_missing_input_file(self, tmp_path):
        assert main(["density", "--expr", str(tmp_path / "missing.txt")]) == 1

    def test_missing_required_flag(self):
        assert main(["discover"]) == 1

    def test_malformed_expression_file(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("1 5 1\nc0 9 1.0\n")
        assert main(["density", "--expr", str(bad)]) == 1

    def test_labels_required(self, fx, tmp_path):
        assert main(["baseline", "--expr", fx["expr"], "--out", str(tmp_path / "b.tsv")]) == 1

    def test_subset_with_unknown_cell(self, fx, tmp_path):
        subset = tmp_path / "subset.tsv"
        subset.write_text("nope\t0.5\n")
        code = main(["discover", "--expr", fx["expr"], "--weights", fx["weights"], "--subset", str(subset),
                     "--out", str(tmp_path / "r.tsv")])
        assert code == 1

    def test_plan_must_cover_the_dataset(self, fx, tmp_path):
        plan = tmp_path / "plan.tsv"
        plan.write_text("nope\t1.0\n")
        code = main(["discover", "--expr", fx["expr"], "--weights", fx["weights"], "--plan", str(plan), "-k", "1",
                     "--out", str(tmp_path / "r.tsv")])
        assert code == 1


def test_synth(tmp_path):
    directory = tmp_path / "fixture"
    run("synth", "--out", directory, "--seed", 3)
    assert {"expression.txt", "labels.tsv", "symbols.tsv", "ground_truth.tsv", "weights.txt", "weights.f32"} <= set(
        os.listdir(directory)
    )


@pytest.mark.slow
def test_file_loaded_weights_recover_planted_pairs(fx, tmp_path):
    dataset = load_dataset(fx["expr"], fx["labels"])
    control = str(tmp_path / "shuffled_weights.txt")
    save_weights(coexpression_weights(shuffled_labels(dataset, seed=1), ModelConfig(n_genes=dataset.n_genes, seed=42)), control)

    scores = {}
    for name, weights in (("planted", fx["weights"]), ("shuffled", control)):
        ranked, result = tmp_path / f"{name}.tsv", tmp_path / f"{name}.nes"
        run("discover", "--expr", fx["expr"], "--labels", fx["labels"], "--symbols", fx["symbols"],
            "--weights", weights, "--mode", "all", "--out", ranked)
        run("eval", "--ranked", ranked, "--ground-truth", fx["ground_truth"], "--symbols", fx["symbols"],
            "--n-perm", 1000, "--out", result)
        scores[name] = float(read(result).split()[1])
    assert scores["planted"] > scores["shuffled"]
    assert scores["planted"] > 0.5

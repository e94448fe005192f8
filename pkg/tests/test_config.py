import numpy as np
import pytest
from pydantic import ValidationError

import config as settings
from models import AggregationMode, RunConfig
from seeding import derive_seed, stream


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed=7\nrows=250\nrange=5000\nuniform=yes\nmode=contrastive\nground-truth=truth.tsv\n")
    return str(path)


class TestResolve:
    def test_environment_defaults(self, monkeypatch):
        monkeypatch.setattr(settings, "DEFAULT_SEED", 99)
        monkeypatch.setattr(settings, "DEFAULT_ROWS", 300)
        merged = settings.resolve({})
        assert merged["seed"] == 99
        assert merged["n_rows"] == 300

    def test_file_overrides_environment(self, config_file):
        config = RunConfig(**settings.resolve({}, config_file))
        assert config.seed == 7
        assert config.n_rows == 250
        assert config.n_buckets == 5000
        assert config.uniform is True
        assert config.mode == AggregationMode.CONTRASTIVE
        assert config.ground_truth_path == "truth.tsv"

    def test_flags_override_file(self, config_file):
        config = RunConfig(**settings.resolve({"seed": 11, "n_rows": None, "mode": "all"}, config_file))
        assert config.seed == 11
        assert config.n_rows == 250
        assert config.mode == AggregationMode.ALL

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            settings.resolve({}, str(tmp_path / "nope.cfg"))

    def test_boolean_words(self, tmp_path):
        path = tmp_path / "flags.cfg"
        path.write_text("normalize=off\nweighted-estimator=1\n")
        merged = settings.read_config_file(str(path))
        assert merged == {"normalize": False, "weighted_estimator": True}


class TestRunConfig:
    def test_sampling_needs_exactly_one_size(self):
        with pytest.raises(ValidationError):
            RunConfig(sampling=True)
        with pytest.raises(ValidationError):
            RunConfig(sampling=True, sample_fraction=0.1, sample_k=5)
        assert RunConfig(sampling=True, sample_k=5).sample_k == 5

    @pytest.mark.parametrize("fraction", [0.0, 1.2])
    def test_fraction_range(self, fraction):
        with pytest.raises(ValidationError):
            RunConfig(sample_fraction=fraction)

    def test_permutation_floor(self):
        with pytest.raises(ValidationError):
            RunConfig(n_perm=50)

    def test_heads_divide_model_width(self):
        with pytest.raises(ValidationError):
            RunConfig(d_model=30, n_heads=4)

    def test_derived_configs_use_labelled_seeds(self):
        config = RunConfig(seed=5, n_rows=64, n_buckets=128)
        assert config.hash_config.seed == derive_seed(5, "cws")
        assert (config.hash_config.n_rows, config.hash_config.n_buckets) == (64, 128)
        encoder = config.encoder_config(300)
        assert encoder.n_genes == 300
        assert encoder.seed == derive_seed(5, "model")
        assert encoder.seed != config.hash_config.seed


class TestSeeding:
    def test_derive_seed_is_stable_and_labelled(self):
        assert derive_seed(42, "cws") == derive_seed(42, "cws")
        assert derive_seed(42, "cws") != derive_seed(42, "sample")
        assert derive_seed(42, "cws") != derive_seed(43, "cws")
        assert derive_seed(42, "a", "b") != derive_seed(42, "ab")
        assert 0 <= derive_seed(2**63, "x") < 2**64

    def test_streams_reproduce(self):
        np.testing.assert_array_equal(stream(1, "keys").random(10), stream(1, "keys").random(10))
        assert not np.array_equal(stream(1, "keys").random(10), stream(1, "other").random(10))

"""
Tests for experiment configuration loading and process settings
"""
import json
import os
from pathlib import Path

import pytest
from pydantic import ValidationError

from config import SEED_OFFSETS, ExperimentConfig, load_config, load_settings
from utils import ConfigurationError, MissingArtifactError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


class TestDefaults:
    def test_detector_hyperparameters(self):
        config = ExperimentConfig()
        assert config.mlp.hidden_sizes == [256, 32, 256]
        assert config.mlp.activation == "leaky_relu"
        assert config.mlp.dropout_rate == 0.7
        assert config.mlp.pos_class_weight == 8.5
        assert config.mlp.weight_decay == 0.00246
        assert config.mlp.adam_beta1 == 0.99
        assert config.mlp.epochs == 10 and config.mlp.batch_size == 32

    def test_stage_hyperparameters(self):
        config = ExperimentConfig()
        assert (config.sadvnet.advtrain.m, config.sadvnet.advtrain.k) == (10, 100)
        assert config.sadvnet.smoothing_lambda == 0.5
        assert (config.wadvnet.advtrain.m, config.wadvnet.advtrain.k) == (2, 75)
        assert config.wadvnet.smoothing_lambda == 0.0
        assert config.teacher.n_trees == 60 and config.teacher.min_samples_leaf == 50
        assert config.anomaly.subsample_size == 256 and config.anomaly.contamination == 0.14
        assert config.cascade.sigma1 == 0.78
        assert config.attack.budgets == [25, 50, 100]

    def test_shipped_configs_validate(self):
        default = load_config(str(CONFIGS / "default.json"))
        desk = load_config(str(CONFIGS / "desk.json"))
        assert default.mlp == ExperimentConfig().mlp
        assert default.cascade.sigma1 == desk.cascade.sigma1 == 0.78
        assert desk.data.synth.n_rounds == 4
        assert desk.search["advtrain"].trials == 3


class TestSeeds:
    def test_components_get_distinct_seeds(self):
        seeds = ExperimentConfig(seed=10).seeds()
        assert len(set(seeds.values())) == len(SEED_OFFSETS)
        assert seeds["data"] == 10

    def test_seeds_flow_into_component_configs(self):
        config = ExperimentConfig(seed=3)
        assert config.mlp_config("vanilla").seed == config.seed_for("vanilla")
        assert config.stage_config("sadvnet").advtrain.seed == config.seed_for("sadvnet")
        assert config.teacher_config().seed == config.seed_for("teacher")
        assert config.anomaly_config().seed == config.seed_for("anomaly")
        assert config.ga_config().seed == config.seed_for("attack")

    def test_feature_eligibility_reaches_stages(self):
        config = ExperimentConfig.model_validate({"features": {"eligible_categories": ["code"]}})
        assert config.stage_config("wadvnet").advtrain.eligible_categories == ["code"]


class TestLoadConfig:
    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps({"cascade": {"sigma1": 0.6}, "seed": 4}))
        config = load_config(str(path), overrides=["cascade.sigma1=0.9", "sadvnet.advtrain.k=40"])
        assert config.cascade.sigma1 == 0.9
        assert config.sadvnet.advtrain.k == 40
        assert config.sadvnet.advtrain.m == 10
        assert config.seed == 4

    def test_seed_argument_wins(self, tmp_path):
        assert load_config(overrides=["seed=1"], seed=8).seed == 8

    def test_empty_budget_list(self):
        assert load_config(overrides=["attack.budgets=[]"]).attack.budgets == []

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError) as caught:
            load_config(str(tmp_path / "absent.json"))
        assert "absent.json" in str(caught.value)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_config(str(path))

    def test_override_through_a_scalar(self):
        with pytest.raises(ConfigurationError):
            load_config(overrides=["seed=1", "seed.inner=2"])

    def test_out_of_range_values(self):
        with pytest.raises(ValidationError):
            load_config(overrides=["cascade.sigma1=1.5"])
        with pytest.raises(ValidationError):
            load_config(overrides=["attack.budgets=[-1]"])

    def test_test_path_needs_train_path(self):
        with pytest.raises(ValidationError):
            load_config(overrides=["data.test_path=test.txt"])

    def test_hash_tracks_content(self):
        assert load_config().hash() == ExperimentConfig().hash()
        assert load_config(overrides=["cascade.sigma1=0.7"]).hash() != ExperimentConfig().hash()


class TestSettings:
    def test_environment_values(self, monkeypatch, tmp_path):
        monkeypatch.chdir(tmp_path)
        monkeypatch.setenv("SENTINEL_OUT_DIR", str(tmp_path / "runs"))
        monkeypatch.setenv("SENTINEL_LOG_LEVEL", "debug")
        monkeypatch.delenv("SENTINEL_DATABASE_URL", raising=False)
        settings = load_settings()
        assert settings.out_dir == str(tmp_path / "runs")
        assert settings.log_level == "DEBUG"
        assert settings.database_url is None

    def test_dotenv_file(self, monkeypatch, tmp_path):
        monkeypatch.chdir(tmp_path)
        monkeypatch.delenv("SENTINEL_DATABASE_URL", raising=False)
        (tmp_path / ".env").write_text("SENTINEL_DATABASE_URL=sqlite:///ledger.db\n")
        try:
            assert load_settings().database_url == "sqlite:///ledger.db"
        finally:
            os.environ.pop("SENTINEL_DATABASE_URL", None)

import json
import math

import pytest

from dbnrl.config import ExperimentConfig
from dbnrl.errors import ConfigError
from dbnrl.experiment import CASE_STUDY_OPTIMIZER, FermentationScenario
from dbnrl.integrated import IntegratedScenario
from dbnrl.kinetics import KineticParams


def test_defaults_match_the_case_study():
    cfg = ExperimentConfig()
    assert cfg.R == 8 and cfg.kappa == 10.0 and cfg.macro_reps == 30
    assert cfg.optimizer == CASE_STUDY_OPTIMIZER
    assert cfg.gibbs.n_draws == 100 and cfg.gibbs.burn_in == 500
    sc = cfg.scenario_object()
    assert isinstance(sc, FermentationScenario) and sc.feed_cost == 534.52


@pytest.mark.parametrize("doc", [
    {"samples": 3},
    {"gibbs": {"draws": 3}},
    {"optimizer": {"learning_rate": 0.1}},
    {"reward": {"price": 1.0}},
    {"prior": {"delta": 1.0}},
    {"purification": {"zeta3_range": [1, 2]}},
    {"benchmark": {"sizes": [8]}},
    {"shapley": {"k": 1}},
])
def test_unknown_keys_are_rejected_at_every_level(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


@pytest.mark.parametrize("doc", [
    {"kappa": 0}, {"kappa": "huge"}, {"scenario": "batch"}, {"R": 0}, {"seed": -1},
    {"box": {"S": [0.1, -0.1]}}, {"prior": {"shape": 0}}, {"gibbs": {"thinning": 0}},
    {"benchmark": {"horizons": [1]}}, {"purification": {"practice_zeta": [45]}},
    {"kinetics_file": "/nonexistent/kinetics.txt"},
])
def test_invalid_values(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_infinite_kappa_and_round_trip():
    cfg = ExperimentConfig.from_dict({"kappa": "inf", "optimizer": {"iterations": 7}})
    assert math.isinf(cfg.kappa)
    assert cfg.optimizer.iterations == 7
    assert cfg.optimizer.draws_per_iteration == CASE_STUDY_OPTIMIZER.draws_per_iteration
    doc = cfg.to_dict()
    assert doc["kappa"] == "inf"
    again = ExperimentConfig.from_dict(json.loads(json.dumps(doc)))
    assert again == cfg and again.digest() == cfg.digest()
    assert cfg.with_seed(5).digest() != cfg.digest()
    assert cfg.with_seed(5).seed == 5


def test_json_file_and_relative_kinetics(tmp_path):
    KineticParams(mu_max=0.5).to_file(tmp_path / "kin.txt")
    (tmp_path / "cfg.json").write_text(json.dumps({"kinetics_file": "kin.txt",
                                                   "scenario": "integrated"}))
    cfg = ExperimentConfig.from_json(tmp_path / "cfg.json")
    sc = cfg.scenario_object()
    assert isinstance(sc, IntegratedScenario)
    assert sc.fermentation.params.mu_max == 0.5
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(tmp_path / "bad.json")
    (tmp_path / "kin.txt").write_text("speed = 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(tmp_path / "cfg.json").scenario_object()

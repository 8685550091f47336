import json

import pytest

from regce import config as cfgmod
from regce.config import ConfigError, ExperimentConfig


def test_default_round_trip():
    cfg = ExperimentConfig()
    back = cfgmod.parse(cfgmod.dumps(cfg))
    assert cfgmod.to_dict(back) == cfgmod.to_dict(cfg)


def test_partial_document_fills_defaults():
    cfg = cfgmod.parse('{"train": {"epochs": 7, "schedule": {"plateau": {"patience": 2}}}}')
    assert cfg.train.epochs == 7
    assert cfg.train.schedule.plateau.patience == 2
    assert cfg.train.schedule.initial_lr == 0.1
    assert cfg.train.optimizer.momentum == 0.9 and cfg.train.optimizer.weight_decay == 5e-4


@pytest.mark.parametrize("doc,where", [
    ({"trian": {}}, "trian"),
    ({"train": {"epoch": 3}}, "train.epoch"),
    ({"train": {"schedule": {"plateau": {"patiense": 3}}}}, "train.schedule.plateau.patiense"),
    ({"mixmatch": {"lambda_U": 5}}, "mixmatch.lambda_U"),
])
def test_unknown_keys_rejected(doc, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        cfgmod.parse(json.dumps(doc))


@pytest.mark.parametrize("doc", [
    {"train": {"epochs": "10"}},
    {"train": {"epochs": 2.5}},
    {"train": {"dual_batch": 1}},
    {"train": {"model": []}},
    {"train": {"seed": None}},
])
def test_type_mismatches_rejected(doc):
    with pytest.raises(ConfigError):
        cfgmod.parse(json.dumps(doc))


def test_int_accepted_for_float():
    cfg = cfgmod.parse('{"train": {"schedule": {"initial_lr": 1}}}')
    assert cfg.train.schedule.initial_lr == 1.0 and isinstance(cfg.train.schedule.initial_lr, float)


def test_optional_null_accepted():
    cfg = cfgmod.parse('{"train": {"strong": {"kind": "strong", "cutout_size": null}}}')
    assert cfg.train.strong.cutout_size is None


@pytest.mark.parametrize("doc", [
    {"train": {"noise": {"kind": "pairflip"}}},
    {"train": {"noise": {"rate": 1.2}}},
    {"train": {"batch_size": 7}},
    {"train": {"schedule": {"kind": "linear"}}},
    {"matrix": {"noise_rates": [0.2, 2.0]}},
    {"matrix": {"seeds": []}},
    {"dataset": {"kind": "cifar10"}},
    {"mixmatch": {"T": 0}},
])
def test_semantic_validation(doc):
    with pytest.raises(ConfigError):
        cfgmod.parse(json.dumps(doc))


def test_invalid_json():
    with pytest.raises(ConfigError, match="invalid JSON"):
        cfgmod.parse("{not json")


def test_load_from_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"matrix": {"seeds": [0, 1, 2], "noise_rates": [0.2, 0.4]}}')
    cfg = cfgmod.load(path)
    assert cfg.matrix.seeds == [0, 1, 2] and cfg.matrix.noise_rates == [0.2, 0.4]

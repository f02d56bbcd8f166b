import json

import pytest

from shapeline import config as C
from shapeline import model as M
from shapeline.errors import ConfigError, DataIOError


def test_defaults_follow_training_recipe():
    cfg = C.RunConfig()
    hp = cfg.train.train_config()
    assert (hp.epochs, hp.batch_size, hp.lr, hp.momentum, hp.weight_decay) == (200, 16, 1e-3, 0.9, 5e-4)
    assert cfg.eval.rates == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7) and cfg.eval.repetitions == 10
    assert cfg.model_config() == M.desk_config()


def test_round_trip_and_digest(tmp_path):
    cfg = C.RunConfig().override("train", lr=0.003, epochs=5).override("cqt", height=32, width=48)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = C.load(p)
    assert back == cfg and back.digest() == cfg.digest()
    assert back.model_config().input == (3, 32, 48)
    assert cfg.digest() != C.RunConfig().digest()


def test_partial_file_keeps_other_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"train": {"epochs": 3}}')
    cfg = C.load(p)
    assert cfg.train.epochs == 3 and cfg.train.lr == 1e-3 and cfg.dataset == C.DatasetSection()
    assert cfg.override("train", epochs=None) is cfg


@pytest.mark.parametrize("payload", [
    '{"trian": {}}',
    '{"train": {"epochz": 3}}',
    '{"train": {"epochs": "3"}}',
    '{"train": {"epochs": -1}}',
    '{"train": {"lr": true}}',
    '{"model": {"preset": "huge"}}',
    '{"model": {"dropout": 1.0}}',
    '{"eval": {"rates": [0.0, 0.5]}}',
    '{"eval": {"methods": ["svm"]}}',
    '{"dataset": {"labels": "some"}}',
    '{"cqt": {"floor_db": 3.0}}',
    '[1, 2]',
    '{not json',
])
def test_bad_configs(tmp_path, payload):
    p = tmp_path / "c.json"
    p.write_text(payload)
    with pytest.raises(ConfigError):
        C.load(p)


def test_missing_file():
    with pytest.raises(DataIOError):
        C.load("/nonexistent/run.json")
    assert C.load(None) == C.RunConfig()

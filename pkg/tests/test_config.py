import json

import pytest

from essl.config import ConfigError, RunConfig, from_dict, load


def test_defaults_round_trip():
    cfg = RunConfig()
    assert from_dict(json.loads(cfg.to_json())) == cfg
    assert from_dict({}) == cfg


def test_partial_override():
    cfg = from_dict({"train": {"max_lr": 3e-4}, "loss": {"lambda_flow": 10}, "augment": {"n_rotation_classes": 4}})
    assert cfg.train.max_lr == 3e-4
    assert cfg.train.loss.lambda_flow == 10.0
    assert cfg.train.augment.n_rotation_classes == 4
    assert cfg.train.batch_size == 2


def test_tuples_from_lists():
    cfg = from_dict({"grid": {"range_min": [-4, -4, -1], "range_max": [4, 4, 1]}})
    assert cfg.train.grid.range_min == (-4.0, -4.0, -1.0)
    assert cfg.train.grid.dims == (32, 32, 8)


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"optim": {}}, "optim"),
        ({"train": {"lr": 1}}, "train.lr"),
        ({"train": {"loss": {}}}, "train.loss"),
        ({"train": {"total_steps": 1.5}}, "train.total_steps"),
        ({"train": {"spatial": "yes"}}, "train.spatial"),
        ({"train": {"max_lr": 0}}, "max_lr"),
        ({"loss": {"tau": -1}}, "tau"),
        ({"augment": {"yaw_range": [0, 1, 2]}}, "augment.yaw_range"),
        ({"synth": {"n_objects": -1}}, "n_objects"),
        ({"eval": {"views_per_pair": 0}}, "views_per_pair"),
        ({"paths": {"train_data": 3}}, "paths.train_data"),
        ({"train": []}, "train"),
    ],
)
def test_rejections_name_the_field(doc, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        from_dict(doc)


def test_overrides():
    cfg = RunConfig().with_overrides(steps=7, seed=11)
    assert cfg.train.total_steps == 7 and cfg.train.seed == 11 and cfg.synth.seed == 11
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(steps=0)


def test_load_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"train": {"batch_size": 4}}')
    assert load(p).train.batch_size == 4
    p.write_text("{oops")
    with pytest.raises(ConfigError):
        load(p)
    with pytest.raises(OSError):
        load(tmp_path / "missing.json")
    assert load(None) == RunConfig()


def test_write_echo(tmp_path):
    cfg = from_dict({"train": {"gamma_base": 0.9996}})
    path = cfg.write(tmp_path)
    assert load(path) == cfg

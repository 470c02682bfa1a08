"""Config tree: presets, overlays, YAML snapshots, validation."""
import dataclasses

import pytest
import yaml

from skelflow.configs import (PRESETS, ConfigError, RetargetConfig, RunConfig,
                              SampleConfig, desk_preset, from_dict, load_config,
                              paper_preset, prepare_run_dir, run_root,
                              save_config, to_dict)
from skelflow.features import FeatureLayout


def test_presets_construct():
    desk = desk_preset()
    assert desk.model.joints == 16
    assert desk.model.feat_dim == FeatureLayout(16).total_dim
    paper = paper_preset()
    assert paper.model.joints == 24
    assert paper.model.hidden_dim == 432
    assert paper.model.n_layers == 12
    assert paper.train.lr == 5e-5
    assert paper.train.batch == 512
    assert paper.train.epochs == 500
    assert set(PRESETS) == {"desk", "paper"}


def test_dict_round_trip():
    for make in (desk_preset, paper_preset):
        cfg = make()
        through_yaml = yaml.safe_load(yaml.safe_dump(to_dict(cfg)))
        assert from_dict(through_yaml, base=make()) == cfg


def test_partial_overlay_changes_only_named_keys():
    base = desk_preset()
    cfg = from_dict({"train": {"lr": 1e-4}, "edit": {"w_tgt": {"text": 9.0}}}, base)
    assert cfg.train.lr == 1e-4
    assert cfg.edit.w_tgt.text == 9.0
    assert cfg.edit.w_tgt.skel == base.edit.w_tgt.skel
    assert cfg.train.batch == base.train.batch
    assert cfg.model == base.model


def test_unknown_key_names_dotted_path():
    with pytest.raises(ConfigError, match=r"unknown config key: train\.lrx"):
        from_dict({"train": {"lrx": 1.0}})
    with pytest.raises(ConfigError, match=r"unknown config key: edit\.w_src\.textx"):
        from_dict({"edit": {"w_src": {"textx": 1.0}}})
    with pytest.raises(ConfigError, match="unknown config key: optimizer"):
        from_dict({"optimizer": {}})


def test_invalid_value_names_section():
    with pytest.raises(ConfigError, match="train"):
        from_dict({"train": {"lr": -1.0}})
    with pytest.raises(ConfigError, match="model"):
        from_dict({"model": {"hidden_dim": 33}})


def test_cross_field_validation():
    # model and data must agree on the skeleton
    with pytest.raises(ConfigError, match="joints"):
        from_dict({"data": {"joints": 24}})
    with pytest.raises(ConfigError, match="prompt_len"):
        from_dict({"data": {"prompt_len": 8}})


def test_lists_become_tuples():
    cfg = from_dict({"retarget": {"sweep": [5, 10]},
                     "data": {"scale_choices": [0.8, 1.2]}})
    assert cfg.retarget.sweep == (5, 10)
    assert cfg.data.scale_choices == (0.8, 1.2)


def test_sample_and_retarget_validation():
    with pytest.raises(ValueError):
        SampleConfig(steps=0)
    with pytest.raises(ValueError):
        SampleConfig(frames=0)
    with pytest.raises(ValueError):
        RetargetConfig(sweep=())
    with pytest.raises(ValueError):
        RetargetConfig(steps=10, sweep=(10,))
    with pytest.raises(ValueError):
        RetargetConfig(steps=10, sweep=(0,))


def test_file_round_trip(tmp_path):
    cfg = from_dict({"train": {"epochs": 7}, "sample": {"frames": 32}})
    path = tmp_path / "run.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_load_rejects_non_mapping(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(path)


def test_run_root_env(monkeypatch):
    monkeypatch.delenv("SKELFLOW_RUN_ROOT", raising=False)
    assert str(run_root()) == "runs"
    monkeypatch.setenv("SKELFLOW_RUN_ROOT", "/tmp/elsewhere")
    assert str(run_root()) == "/tmp/elsewhere"


def test_prepare_run_dir_snapshot(tmp_path):
    cfg = from_dict({"train": {"lr": 2e-4}})
    out = prepare_run_dir(tmp_path / "run1", cfg)
    assert load_config(out / "config.yaml") == cfg
    assert (out / "version.txt").read_text().startswith("skelflow ")


def test_run_config_is_a_plain_dataclass_tree():
    # every section is a dataclass, so asdict/replace tooling works on it
    cfg = desk_preset()
    for f in dataclasses.fields(RunConfig):
        assert dataclasses.is_dataclass(getattr(cfg, f.name))

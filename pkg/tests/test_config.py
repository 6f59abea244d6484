import pytest

from handlens.config import CONFIG_VERSION, RunConfig, apply_overrides, config_from_file


def test_round_trip(tmp_path):
    cfg = RunConfig(arch="resnet18", num_classes=3, lr_max=5e-3, one_cycle=False,
                    aug_max_rotation=7.5, dataset_root="/data/minerals")
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    assert config_from_file(path) == cfg


def test_serialization_is_flat_and_versioned():
    lines = RunConfig().to_lines()
    assert lines[0] == f"config_version = {CONFIG_VERSION}"
    assert all(" = " in line for line in lines)
    # every field appears: nothing is a hidden default
    from dataclasses import fields
    assert len(lines) == len(fields(RunConfig))


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rate = 0.1\n")
    with pytest.raises(ValueError, match="unknown config key"):
        config_from_file(path)


def test_newer_version_rejected(tmp_path):
    path = tmp_path / "future.cfg"
    path.write_text(f"config_version = {CONFIG_VERSION + 1}\n")
    with pytest.raises(ValueError, match="newer"):
        config_from_file(path)


def test_bool_parsing(tmp_path):
    path = tmp_path / "flags.cfg"
    path.write_text("one_cycle = off\nstratified = true\n")
    cfg = config_from_file(path)
    assert cfg.one_cycle is False and cfg.stratified is True


def test_comments_and_blanks_ignored(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# a comment\n\nepochs = 3\n")
    assert config_from_file(path).epochs == 3


def test_overrides():
    cfg = apply_overrides(RunConfig(), {"epochs": 2, "one_cycle": False})
    assert cfg.epochs == 2 and cfg.one_cycle is False
    with pytest.raises(ValueError):
        apply_overrides(RunConfig(), {"nonsense": 1})


def test_train_settings_mapping():
    cfg = RunConfig(one_cycle=False, epochs=4, aug_max_zoom=1.2)
    settings = cfg.train_settings()
    assert settings.schedule == "constant"
    assert settings.epochs == 4
    assert settings.augmentation.max_zoom == 1.2


def test_model_builder_uses_arch():
    cfg = RunConfig(arch="densenet-g8-b1.1-s16", num_classes=3)
    model = cfg.model_builder()(0)
    assert model.num_classes == 3 and model.arch == "densenet-g8-b1.1-s16"

import pytest

from fieldrecon.config import ConfigError, RunConfig, apply_overrides, load_config


def test_defaults_without_file():
    cfg = load_config(None)
    assert cfg.model.num_layers == 4 and cfg.model.d_token == 128 and cfg.train.obs_fraction == 0.02
    assert str(cfg.dataset_path).endswith("data/manifest.json")


def test_file_and_overrides(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[model]\nnum_layers = 2\n[ablation]\ndensities = 0.01, 0.05\n[run]\nstrict = yes\n")
    cfg = load_config(p)
    assert cfg.model.num_layers == 2 and cfg.ablation.densities == [0.01, 0.05] and cfg.run.strict is True
    apply_overrides(cfg, ["model.num_layers=3", "generate.x_max=8"])
    assert cfg.model.num_layers == 3 and cfg.generate.x_max == 8.0


def test_ini_round_trip(tmp_path):
    cfg = apply_overrides(RunConfig(), ["eval.methods=rformer,kriging", "train.lr=0.005"])
    p = tmp_path / "again.ini"
    p.write_text(cfg.to_ini())
    assert load_config(p).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("text, match", [
    ("[model]\nnum_layer = 2\n", "unknown key"),
    ("[modle]\nnum_layers = 2\n", "unknown section"),
    ("[model]\nnum_layers = two\n", "cannot parse"),
    ("[run]\nstrict = maybe\n", "cannot parse"),
])
def test_bad_files(tmp_path, text, match):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(p)


def test_bad_overrides_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="section.key=value"):
        apply_overrides(RunConfig(), ["num_layers=2"])
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.ini")

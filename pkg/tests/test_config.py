from pathlib import Path

import pytest
from pydantic import ValidationError

from hsacnet.config import RESOLVED_NAME, RunConfig, freeze_config, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_round_trip(tmp_path):
    cfg = load_config()
    path = freeze_config(cfg, tmp_path)
    assert path.name == RESOLVED_NAME
    again = load_config(path)
    assert again == cfg
    # tuples survive the YAML trip as tuples after validation
    assert again.augment.weak.resize_scale_range == (0.5, 2.0)


@pytest.mark.parametrize("name", ["desk.yaml", "paper.yaml"])
def test_shipped_configs_load(name, tmp_path):
    cfg = load_config(CONFIGS / name)
    assert load_config(freeze_config(cfg, tmp_path)) == cfg


def test_overrides_and_validation():
    cfg = load_config(overrides={"train.tau": 0.8, "data.labeled_ratio": 0.1})
    assert cfg.train.tau == 0.8 and cfg.data.labeled_ratio == 0.1
    for bad in ({"train.tau": 0.0}, {"train.unknown": 1}, {"encoder.variant": "huge"},
                {"data.labeled_ratio": 0.0}, {"augment.weak.hflip_prob": 2.0}, {"bogus": 1}):
        with pytest.raises(ValidationError):
            load_config(overrides=bad)


def test_init_switch_mapping():
    rand = RunConfig().encoder_config()
    assert rand.init_mode == "random" and not rand.freeze_backbone and rand.adapter_enabled
    pre = load_config(overrides={"encoder.init": "pretrained"}).encoder_config()
    assert pre.freeze_backbone and pre.adapter_enabled and pre.init_mode == "pretrained-import"
    frozen = load_config(overrides={"encoder.init": "frozen"}).encoder_config()
    assert frozen.freeze_backbone and not frozen.adapter_enabled


def test_neck_resolution():
    assert RunConfig().network_config().neck_channels == 16
    assert load_config(overrides={"encoder.variant": "paper"}).network_config().neck_channels == 64
    assert load_config(overrides={"decoder.neck_channels": "none"}).network_config().neck_channels is None
    conv = load_config(overrides={"encoder.variant": "conv-baseline"}).encoder_config()
    assert conv.variant == "conv"


def test_missing_pretrained_path():
    with pytest.raises(ValidationError, match="pretrained_path"):
        load_config(overrides={"encoder.init": "pretrained", "encoder.pretrained_path": "/no/such.pt"})


def test_non_mapping_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError, match="mapping"):
        load_config(p)

import pytest

from vesper.config import EvalSettings, RunConfig, load_run_config
from vesper.downstream import RepresentationMode, SplitMode
from vesper.encoder import DESK_FRONTEND
from vesper.errors import ConfigError
from vesper.masking import Strategy


def write(tmp_path, text):
    p = tmp_path / "run.yaml"
    p.write_text(text)
    return p


def test_defaults_without_file_are_pretraining_table():
    cfg = load_run_config(None)
    assert cfg.train.epochs == 100
    assert cfg.train.warmup_epochs == 5
    assert cfg.train.base_lr == 5e-4
    assert cfg.train.min_lr == 5e-6
    assert cfg.train.optimizer == "adamw"
    assert cfg.train.clip_duration_s == 5.0
    assert cfg.mask.phoneme_span_ms == 160
    assert cfg.mask.word_span_ms == 800
    assert cfg.encoder is None
    assert cfg.downstream.k == 5
    assert cfg.paths == {}


def test_finetune_flag_switches_train_baseline():
    cfg = load_run_config(None, finetune=True)
    assert cfg.train.epochs == 50
    assert cfg.train.warmup_epochs == 0
    assert cfg.train.base_lr == 7e-4
    assert cfg.train.min_lr == 7e-6
    assert cfg.train.optimizer == "sgd"
    assert cfg.train.clip_duration_s == 6.5


def test_yaml_sections_land_in_dataclasses(tmp_path):
    p = write(
        tmp_path,
        """
train:
  epochs: 3
  warmup_epochs: 1
  batch_size: 4
mask:
  strategy: random
  phoneme_count: 6
downstream:
  k: 3
  mode: LastLayerOnly
  split: Random
paths:
  manifest: data/m.jsonl
""",
    )
    cfg = load_run_config(p)
    assert cfg.train.epochs == 3
    assert cfg.train.batch_size == 4
    assert cfg.train.base_lr == 5e-4  # untouched keys keep table defaults
    assert cfg.mask.strategy is Strategy.RANDOM
    assert cfg.mask.phoneme_count == 6
    assert cfg.downstream.k == 3
    assert cfg.downstream.mode is RepresentationMode.LAST_LAYER_ONLY
    assert cfg.downstream.split is SplitMode.RANDOM
    assert cfg.paths == {"manifest": "data/m.jsonl"}


def test_unknown_section_rejected(tmp_path):
    p = write(tmp_path, "trian:\n  epochs: 3\n")
    with pytest.raises(ConfigError, match="trian"):
        load_run_config(p)


def test_unknown_key_rejected_with_name(tmp_path):
    p = write(tmp_path, "train:\n  epoch: 3\n")
    with pytest.raises(ConfigError, match="epoch"):
        load_run_config(p)


def test_unknown_path_key_rejected(tmp_path):
    p = write(tmp_path, "paths:\n  studnet: x.vspr\n")
    with pytest.raises(ConfigError, match="studnet"):
        load_run_config(p)


def test_section_must_be_mapping(tmp_path):
    p = write(tmp_path, "train: 3\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_run_config(p)


def test_invalid_value_wrapped_as_config_error(tmp_path):
    p = write(tmp_path, "train:\n  epochs: -1\n")
    with pytest.raises(ConfigError, match="train"):
        load_run_config(p)


def test_bad_yaml_is_config_error(tmp_path):
    p = write(tmp_path, "train: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_run_config(p)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_run_config(tmp_path / "absent.yaml")


def test_overrides_merge_on_top_of_file(tmp_path):
    p = write(tmp_path, "train:\n  epochs: 9\n  seed: 1\n")
    cfg = load_run_config(p, overrides={"train": {"seed": 42}})
    assert cfg.train.epochs == 9
    assert cfg.train.seed == 42


def test_encoder_preset_with_overrides(tmp_path):
    p = write(tmp_path, "encoder:\n  preset: desk-student\n  num_layers: 2\n")
    cfg = load_run_config(p)
    assert cfg.encoder.num_layers == 2
    assert cfg.encoder.dim == 64
    assert cfg.encoder.conv_frontend == DESK_FRONTEND


def test_encoder_unknown_preset(tmp_path):
    p = write(tmp_path, "encoder:\n  preset: nope\n")
    with pytest.raises(ConfigError):
        load_run_config(p)


def test_encoder_explicit_geometry(tmp_path):
    p = write(
        tmp_path,
        """
encoder:
  num_layers: 2
  dim: 8
  heads: 2
  ffn_dim: 16
  conv_frontend: [[8, 320, 320]]
  pos_conv: null
""",
    )
    cfg = load_run_config(p)
    assert cfg.encoder.conv_frontend == ((8, 320, 320),)
    assert cfg.encoder.pos_conv is None


def test_downstream_validation():
    with pytest.raises(ConfigError, match="k must be"):
        EvalSettings(k=1)
    with pytest.raises(ConfigError, match="hidden"):
        EvalSettings(hidden=0)


def test_resolved_echoes_every_section(tmp_path):
    p = write(tmp_path, "encoder:\n  preset: desk-teacher\npaths:\n  out_dir: runs\n")
    d = load_run_config(p).resolved()
    assert set(d) == {"train", "mask", "encoder", "downstream", "paths"}
    assert d["train"]["base_lr"] == 5e-4
    assert d["encoder"]["num_layers"] == 8
    assert d["paths"] == {"out_dir": "runs"}
    assert RunConfig().resolved()["encoder"] is None


def test_empty_file_gives_defaults(tmp_path):
    p = write(tmp_path, "\n")
    cfg = load_run_config(p)
    assert cfg.train.epochs == 100

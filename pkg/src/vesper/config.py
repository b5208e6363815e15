"""Run configuration files.

A run config is a YAML mapping with up to five sections: train, mask,
encoder, downstream, paths. Every key must be known; section values land
in the matching dataclasses, whose own validation then applies. Defaults
without a file are the published pretraining table values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .downstream import RepresentationMode, SplitMode
from .encoder import EncoderConfig, config_to_dict, preset
from .errors import ConfigError, ContractViolation
from .masking import MaskConfig
from .trainer import TrainConfig, finetune_defaults


@dataclass
class EvalSettings:
    """Downstream evaluation knobs (classifier and cross-validation)."""

    k: int = 5
    split: SplitMode = SplitMode.BY_SPEAKER
    mode: RepresentationMode = RepresentationMode.WEIGHTED
    hidden: int = 256
    include_frontend: bool = True
    classes: list[str] | None = None  # None: derive from manifest labels

    def __post_init__(self):
        self.split = SplitMode(self.split)
        self.mode = RepresentationMode(self.mode)
        if self.k < 2:
            raise ConfigError(f"downstream.k must be >= 2, got {self.k}")
        if self.hidden < 1:
            raise ConfigError("downstream.hidden must be >= 1")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    encoder: EncoderConfig | None = None
    downstream: EvalSettings = field(default_factory=EvalSettings)
    paths: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        """Full echo of every effective value, for --dry-run and logs."""
        out = {
            "train": asdict(self.train),
            "mask": asdict(self.mask),
            "downstream": asdict(self.downstream),
            "paths": dict(self.paths),
        }
        out["encoder"] = config_to_dict(self.encoder) if self.encoder else None
        return out


_PATH_KEYS = {"teacher", "student", "manifest", "out_dir", "log"}


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a mapping, got {type(value).__name__}")
    return value


def _build(cls, kw: dict, section: str, base=None):
    allowed = {f.name for f in fields(cls)}
    unknown = set(kw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    try:
        if base is not None:
            return replace(base, **kw)
        return cls(**kw)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def _build_encoder(kw: dict) -> EncoderConfig | None:
    if not kw:
        return None
    kw = dict(kw)
    base = None
    if "preset" in kw:
        try:
            base = preset(kw.pop("preset"))
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from exc
    if base is not None and not kw:
        return base
    if "conv_frontend" in kw:
        kw["conv_frontend"] = tuple(tuple(s) for s in kw["conv_frontend"])
    if kw.get("pos_conv") is not None:
        kw["pos_conv"] = tuple(kw["pos_conv"])
    return _build(EncoderConfig, kw, "encoder", base=base)


def load_run_config(path=None, finetune: bool = False, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a YAML run config.

    With no path, returns pure defaults (pretraining table, or the
    fine-tuning column when finetune=True). ``overrides`` merges a
    {section: {key: value}} mapping on top, used for CLI flags.
    """
    raw = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    known_sections = {"train", "mask", "encoder", "downstream", "paths"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    if overrides:
        for section, kw in overrides.items():
            merged = dict(raw.get(section) or {})
            merged.update(kw)
            raw[section] = merged

    train_base = finetune_defaults() if finetune else TrainConfig()
    train = _build(TrainConfig, _section(raw, "train"), "train", base=train_base)
    mask = _build(MaskConfig, _section(raw, "mask"), "mask")
    downstream = _build(EvalSettings, _section(raw, "downstream"), "downstream")
    encoder = _build_encoder(_section(raw, "encoder"))
    paths = _section(raw, "paths")
    bad = set(paths) - _PATH_KEYS
    if bad:
        raise ConfigError(f"unknown keys in section 'paths': {sorted(bad)}")
    return RunConfig(train, mask, encoder, downstream, {k: str(v) for k, v in paths.items()})

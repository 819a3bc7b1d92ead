"""Experiment configuration: one TOML file plus flag overrides.

Sections map onto the per-module config dataclasses. The experiment seed is
set once, globally, and flows into every stage; per-section seed keys are
rejected so a run is always reproducible from (file, seed) alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data_synth import SynthConfig
from .errors import ConfigError
from .eval_adapt import AdaptConfig
from .meta_trainer import TrainingConfig
from .network import ArchConfig

_EXPERIMENT_KEYS = ("name", "out_dir", "seed", "data_manifest", "target_subject")
_SECTIONS = ("experiment", "arch", "training", "adaptation", "synth")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    out_dir: str = "runs/default"
    seed: int = 0
    data_manifest: str = ""     # empty: <out_dir>/data/manifest.json
    target_subject: str = ""    # empty: last subject id in the manifest
    arch: ArchConfig = field(default_factory=ArchConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    adaptation: AdaptConfig = field(default_factory=AdaptConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if not self.name:
            raise ConfigError("experiment: name must be non-empty")
        if self.seed < 0:
            raise ConfigError(f"experiment: seed must be >= 0, got {self.seed}")
        for attr in ("channels", "samples", "n_classes"):
            a = getattr(self.arch, attr)
            s = getattr(self.synth, attr)
            if a != s:
                raise ConfigError(
                    f"arch.{attr}={a} disagrees with synth.{attr}={s}")


def _build_section(cls, section: str, data: dict):
    allowed = {f.name for f in dataclasses.fields(cls)}
    clean = {}
    for key, value in data.items():
        if key == "seed":
            raise ConfigError(
                f"[{section}] seed: the seed is set once under [experiment]")
        if key not in allowed:
            raise ConfigError(f"[{section}] unknown key: {key}")
        if isinstance(value, list):
            value = tuple(value)
        clean[key] = value
    return cls(**clean)


def from_sections(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed TOML data, rejecting unknowns."""
    for section in raw:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section: [{section}]")
        if not isinstance(raw[section], dict):
            raise ConfigError(f"[{section}] must be a table of keys")
    exp = raw.get("experiment", {})
    for key in exp:
        if key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"[experiment] unknown key: {key}")
    cfg = ExperimentConfig(
        name=exp.get("name", "default"),
        out_dir=exp.get("out_dir", "runs/default"),
        seed=exp.get("seed", 0),
        data_manifest=exp.get("data_manifest", ""),
        target_subject=exp.get("target_subject", ""),
        arch=_build_section(ArchConfig, "arch", raw.get("arch", {})),
        training=_build_section(TrainingConfig, "training", raw.get("training", {})),
        adaptation=_build_section(AdaptConfig, "adaptation", raw.get("adaptation", {})),
        synth=_build_section(SynthConfig, "synth", raw.get("synth", {})),
    )
    return _propagate_seed(cfg)


def _propagate_seed(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(
        cfg,
        training=replace(cfg.training, seed=cfg.seed),
        adaptation=replace(cfg.adaptation, seed=cfg.seed),
        synth=replace(cfg.synth, seed=cfg.seed),
    )


def load_config(path: Optional[str] = None, seed: Optional[int] = None,
                out_dir: Optional[str] = None) -> ExperimentConfig:
    """Parse ``path`` (defaults apply when None); flag overrides win."""
    if path is None:
        cfg = from_sections({})
    else:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        cfg = from_sections(raw)
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"seed must be >= 0, got {seed}")
        cfg = _propagate_seed(replace(cfg, seed=seed))
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    return cfg

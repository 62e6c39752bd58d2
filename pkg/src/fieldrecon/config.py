"""Run configuration: one INI file with a section per concern.

Every key has a default, so an empty file (or no file) is a valid
configuration. Unknown sections or keys are rejected to catch typos.
Command-line overrides use ``section.key=value`` and win over the file::

    [model]
    num_layers = 2
    d_token = 64

    [ablation]
    densities = 0.01, 0.05, 0.25
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from .vortex import ConfigError, VortexStreetConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "apply_overrides"]


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs"
    strict: bool = False
    dataset: str = ""          # manifest path; empty means "<out>/data/manifest.json"
    train_fraction: float = 0.8


@dataclass
class ModelSection:
    num_layers: int = 4
    num_heads: int = 8
    d_token: int = 128
    ffn_hidden: int = 128
    head_hidden: int = 128
    max_seq_len: int = 1024


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 16
    obs_fraction: float = 0.02
    m_b: int = 256
    n_b: int = 256
    lr: float = 1e-3
    samples_per_snapshot: int = 0      # 0: automatic
    split_pool: int = 8


@dataclass
class EvalSection:
    methods: list = field(default_factory=lambda: ["rformer", "interpolation", "kriging", "gappy_pod"])
    obs_fraction: float = 0.02
    chunk_budget: int = 0              # 0: as large as max_seq_len allows
    max_context: int = 0               # 0: feed every observation
    spectrum: bool = True
    spectrum_resolution: int = 64
    dump_fields: bool = False


@dataclass
class RbfSection:
    neighbors: int = 128
    smoothing: float = 1e-8


@dataclass
class KrigingSection:
    length_scale: float = 1.0
    noise: float = 1e-6
    jitter: float = 1e-6
    max_points: int = 512


@dataclass
class GappySection:
    energy_threshold: float = 0.95


@dataclass
class CnpSection:
    hidden: int = 128
    encoder_layers: int = 4
    decoder_layers: int = 3
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 10000
    max_query: int = 2048


@dataclass
class TnpSection:
    hidden: int = 128
    transformer_layers: int = 4
    heads: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 64
    epochs: int = 1000
    max_query: int = 2048


@dataclass
class AblationSection:
    densities: list = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1, 0.25])
    noise_scales: list = field(default_factory=lambda: [0.01, 0.1, 0.25, 0.5, 1.0])
    retrain_density: bool = True


_SECTIONS = {
    "run": RunSection, "generate": VortexStreetConfig, "model": ModelSection, "train": TrainSection,
    "eval": EvalSection, "rbf": RbfSection, "kriging": KrigingSection, "gappy_pod": GappySection,
    "cnp": CnpSection, "tnp": TnpSection, "ablation": AblationSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    generate: VortexStreetConfig = field(default_factory=VortexStreetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    rbf: RbfSection = field(default_factory=RbfSection)
    kriging: KrigingSection = field(default_factory=KrigingSection)
    gappy_pod: GappySection = field(default_factory=GappySection)
    cnp: CnpSection = field(default_factory=CnpSection)
    tnp: TnpSection = field(default_factory=TnpSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def to_ini(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in values.items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out)

    @property
    def dataset_path(self) -> Path:
        return Path(self.run.dataset) if self.run.dataset else self.out_dir / "data" / "manifest.json"


def _format(v) -> str:
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    return str(v)


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], float):
                return [float(s) for s in items]
            return items
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _set(cfg: RunConfig, section: str, key: str, raw: str, where: str) -> RunConfig:
    if section not in _SECTIONS:
        raise ConfigError(f"{where}: unknown section [{section}]")
    obj = getattr(cfg, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
    value = _convert(raw, getattr(obj, key), where)
    if section == "generate":     # frozen dataclass
        cfg.generate = replace(obj, **{key: value})
    else:
        setattr(obj, key, value)
    return cfg


def load_config(path=None) -> RunConfig:
    """Defaults updated from the INI file at ``path`` (if given)."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        for key, raw in parser.items(section):
            _set(cfg, section, key, raw, f"{path} [{section}] {key}")
    return cfg


def apply_overrides(cfg: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply ``section.key=value`` strings in order."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _set(cfg, section, key, raw, f"override {item!r}")
    return cfg

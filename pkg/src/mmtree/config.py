"""TOML run configuration with strict key checking and CLI overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .estimator import EstimatorConfig
from .mmembed import EmbedTrainConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    n_items: int = 4096
    n_clusters: int = 64
    d_text: int = 16
    d_image: int = 16
    n_users: int = 2000
    events_per_user: int = 40
    T: int = 3
    seed: int = 17
    max_seq_len: int = 128
    noise: float = 0.1


@dataclass(frozen=True)
class EmbedConfig:
    d_out: int = 32
    hidden: int = 64
    pairs_per_item: int = 4
    batch_size: int = 256
    epochs: int = 10
    lr: float = 1e-3
    temperature: float = 0.1
    seed: int = 11

    def train_config(self) -> EmbedTrainConfig:
        return EmbedTrainConfig(
            d_out=self.d_out,
            hidden=self.hidden,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr=self.lr,
            temperature=self.temperature,
            seed=self.seed,
        )


@dataclass(frozen=True)
class TreeConfig:
    seed: int = 19


@dataclass(frozen=True)
class RetrievalConfig:
    beam_width: int = 64
    m_ret: int = 50

    def __post_init__(self):
        if self.beam_width < 1 or self.m_ret < 1:
            raise ConfigError("beam_width and m_ret must be >= 1")
        if self.m_ret > self.beam_width:
            raise ConfigError(
                f"m_ret ({self.m_ret}) exceeds beam_width ({self.beam_width})"
            )


@dataclass(frozen=True)
class EvalConfig:
    n_splits: int = 5
    train_frac: float = 0.8
    hier_levels: tuple[int, ...] = (3, 6, 9, 12)
    attention_users: int = 50


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"]["hier_levels"] = list(d["eval"]["hier_levels"])
        return d


_SECTIONS = {
    "data": DataConfig,
    "embed": EmbedConfig,
    "tree": TreeConfig,
    "estimator": EstimatorConfig,
    "train": TrainConfig,
    "retrieval": RetrievalConfig,
    "eval": EvalConfig,
}


def _coerce(raw: str, like) -> object:
    """Parse an override string into the type of the value it replaces."""
    if isinstance(like, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, (tuple, list)):
        return tuple(int(x) for x in raw.split(",") if x != "")
    return raw


def _build_section(cls, name: str, values: dict) -> object:
    known = {f.name: f for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown key [{name}].{key}")
    kwargs = {}
    for key, val in values.items():
        if known[key].type in ("tuple[int, ...]",) or isinstance(val, list):
            val = tuple(int(x) for x in val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad [{name}] section: {exc}") from exc


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    """Load a TOML config; reject unknown sections or keys.

    ``overrides`` entries look like ``section.key=value`` and are applied
    after the file, coerced to the existing value's type.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    for section in doc:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
    merged = {name: dict(doc.get(name, {})) for name in _SECTIONS}
    for ov in overrides or []:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(
                f"override must look like section.key=value, got {ov!r}"
            )
        target, raw = ov.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        defaults = _SECTIONS[section]()
        if not hasattr(defaults, key):
            raise ConfigError(f"unknown key [{section}].{key}")
        merged[section][key] = _coerce(raw, getattr(defaults, key))
    sections = {
        name: _build_section(cls, name, merged[name])
        for name, cls in _SECTIONS.items()
    }
    cfg = RunConfig(**sections)
    if cfg.estimator.T != cfg.data.T:
        raise ConfigError(
            f"[estimator].T ({cfg.estimator.T}) must equal [data].T ({cfg.data.T})"
        )
    if cfg.estimator.d_user != cfg.data.d_text:
        raise ConfigError(
            f"[estimator].d_user ({cfg.estimator.d_user}) must equal "
            f"[data].d_text ({cfg.data.d_text}): user features are built in "
            "text-feature space"
        )
    if cfg.data.max_seq_len > cfg.estimator.M_mm:
        raise ConfigError(
            f"[data].max_seq_len ({cfg.data.max_seq_len}) exceeds "
            f"[estimator].M_mm ({cfg.estimator.M_mm}); stored sequences must "
            "fit the longer search window"
        )
    return cfg

"""Run configuration: a flat ``section.key = value`` text file.

Blank lines and lines starting with ``#`` are ignored.  Tuples are written
comma-separated.  Every component seed is derived from the global seed by
name, so adding a component never shifts another one's stream.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .seeding import derive_seed


@dataclass
class DataSection:
    images: str = ""
    labels: str = ""
    dataset: str = ""  # existing dataset file; empty means <out>/dataset.lxd written by ingest
    train_fraction: float = 0.8


@dataclass
class AaeSection:
    k: int = 4
    hidden: tuple[int, ...] = (256, 128)
    disc_hidden: tuple[int, ...] = (64, 64)
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    reg_learning_rate: float = 5e-4
    reg_beta1: float = 0.5
    validity_threshold: float = 0.5


@dataclass
class BlackBoxSection:
    hidden: tuple[int, ...] = (128, 64)
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-3
    command: str = ""  # external oracle template with {req} and {resp}; empty uses the built-in MLP
    timeout: float = 60.0


@dataclass
class NeighgenSection:
    size: int = 200
    balance: float = 0.5
    population: int = 100
    generations: int = 20
    crossover_prob: float = 0.5
    mutation_prob: float = 0.2
    mutation_sigma: float = 0.5
    tournament_size: int = 3
    elite_fraction: float = 0.1
    oversampling: int = 10


@dataclass
class SurrogateSection:
    max_depth: int = 8
    min_leaf: int = 2


@dataclass
class ExplainSection:
    n_exemplars: int = 10
    n_counter: int = 2
    budget: int = 20000
    batch: int = 500
    attempts: int = 3
    steps: int = 8


@dataclass
class EvalSection:
    instances: int = 50
    taus: tuple[float, ...] = tuple(float(t) for t in range(0, 101, 10))
    colors: tuple[str, ...] = ("black", "gray", "white")
    knn_sizes: tuple[int, ...] = (1, 2, 3, 4)
    knn_test: int = 500
    epsilon: float = 0.1
    noise_rate: float = 0.01
    replicas: int = 5
    max_tries: int = 20
    max_neighbors: int = 3


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    data: DataSection = field(default_factory=DataSection)
    aae: AaeSection = field(default_factory=AaeSection)
    blackbox: BlackBoxSection = field(default_factory=BlackBoxSection)
    neighgen: NeighgenSection = field(default_factory=NeighgenSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def sub_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)

    @property
    def dataset_path(self) -> Path:
        return Path(self.data.dataset) if self.data.dataset else Path(self.out) / "dataset.lxd"


_SECTIONS = ("data", "aae", "blackbox", "neighgen", "surrogate", "explain", "eval")
_TOP = ("seed", "out")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse_value(text: str, tp, key: str):
    text = text.strip()
    try:
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if typing.get_origin(tp) is tuple:
            inner = typing.get_args(tp)[0]
            if not text:
                return ()
            return tuple(_parse_value(p, inner, key) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}", key=key) from None
    raise ConfigError(f"unsupported type for {key}", key=key)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(p) for p in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def loads(text: str) -> RunConfig:
    cfg = RunConfig()
    top = _hints(RunConfig)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        set_key(cfg, key, value, top=top, lineno=lineno)
    return cfg


def set_key(cfg: RunConfig, key: str, value: str, top=None, lineno: int | None = None) -> None:
    """Assign one dotted key from its textual value."""
    top = top or _hints(RunConfig)
    where = f"line {lineno}: " if lineno else ""
    if key in _TOP:
        setattr(cfg, key, _parse_value(value, top[key], key))
        return
    section, _, name = key.partition(".")
    if section not in _SECTIONS or not name:
        raise ConfigError(f"{where}unknown key {key!r}", key=key)
    sect = getattr(cfg, section)
    hints = _hints(type(sect))
    if name not in hints:
        raise ConfigError(f"{where}unknown key {key!r}", key=key)
    setattr(sect, name, _parse_value(value, hints[name], key))


def dumps(cfg: RunConfig) -> str:
    lines = [f"{k} = {_format_value(getattr(cfg, k))}" for k in _TOP]
    for section in _SECTIONS:
        sect = getattr(cfg, section)
        lines.append("")
        for f in dataclasses.fields(sect):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sect, f.name))}")
    return "\n".join(lines) + "\n"


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", path=str(path))
    cfg = loads(path.read_text())
    for key in ("images", "labels", "dataset"):
        value = getattr(cfg.data, key)
        if value and not Path(value).exists():
            raise ConfigError(f"data.{key} points to a missing file: {value}", key=f"data.{key}")
    return cfg

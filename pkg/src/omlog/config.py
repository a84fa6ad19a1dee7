"""Run configuration: INI files with one section per component."""

from __future__ import annotations

import configparser
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import neural as nn
from .corpus import ConfigError, DrainConfig
from .meta import EpisodeConfig
from .pipeline import Mode, ModelConfig, NormalityConfig, StreamConfig


@dataclass
class DataConfig:
    dataset: str = "samples"  # hdfs | bgl | generic | samples
    input: str = ""
    labels: str = ""
    samples: str = "samples.jsonl"
    checkpoint: str = ""
    embeddings: str = ""
    train_ratio: float = 0.5
    window_size: int = 100
    window_step: int = 100
    key_pattern: str = r"blk_-?\d+"


@dataclass
class ParserConfig:
    depth: int = 4
    similarity_threshold: float = 0.5
    max_children: int = 100

    def drain(self, masks=()) -> DrainConfig:
        return DrainConfig(self.depth, self.similarity_threshold, self.max_children, list(masks))


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    parser: ParserConfig = field(default_factory=ParserConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    output_dir: str = "out"
    base_dir: str = ""  # directory relative paths are resolved against; not serialised

    def resolve(self, path: str) -> Path | None:
        if not path:
            return None
        p = Path(path)
        return p if p.is_absolute() or not self.base_dir else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        return {"data": dataclasses.asdict(self.data), "parser": dataclasses.asdict(self.parser),
                "stream": self.stream.to_dict(), "output_dir": self.output_dir}

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = "") -> "RunConfig":
        return cls(DataConfig(**d.get("data", {})), ParserConfig(**d.get("parser", {})),
                   StreamConfig.from_dict(d.get("stream", {})), d.get("output_dir", "out"), base_dir)

    # -- INI
    def _sections(self):
        s = self.stream
        return {
            "data": self.data, "parser": self.parser, "model": s.model, "train": s.train,
            "normality": s.normality, "normality.sgd": s.normality.sgd, "episode": s.episode, "drift": s.drift,
        }

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        s = self.stream
        cp["run"] = {"output_dir": self.output_dir, "batch_size": str(s.batch_size), "mode": s.mode.value,
                     "seed": str(s.seed), "online_epochs": str(s.online_epochs),
                     "validation_fraction": repr(s.validation_fraction)}
        for name, obj in self._sections().items():
            cp[name] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                        if not dataclasses.is_dataclass(getattr(obj, f.name))}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, base_dir: str = "") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(text)
        cfg = cls(base_dir=base_dir)
        known = set(cfg._sections()) | {"run"}
        for section in cp.sections():
            if section not in known:
                raise ConfigError(f"unknown config section [{section}]")
        if cp.has_section("run"):
            run = cp["run"]
            cfg.output_dir = run.get("output_dir", cfg.output_dir)
            s = cfg.stream
            s.batch_size = run.getint("batch_size", s.batch_size)
            s.mode = Mode(run.get("mode", s.mode.value))
            s.seed = run.getint("seed", s.seed)
            s.online_epochs = run.getint("online_epochs", s.online_epochs)
            s.validation_fraction = run.getfloat("validation_fraction", s.validation_fraction)
        for name, obj in cfg._sections().items():
            if cp.has_section(name):
                _apply(obj, cp[name], name)
        # re-run validation hooks
        s = cfg.stream
        nn.SgdConfig(**dataclasses.asdict(s.train))
        EpisodeConfig(**dataclasses.asdict(s.episode))
        return cfg


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _apply(obj, section, name: str) -> None:
    hints = typing.get_type_hints(type(obj))
    fields = {f.name for f in dataclasses.fields(obj)}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        setattr(obj, key, _coerce(raw, hints[key], f"{name}.{key}"))


def _coerce(raw: str, hint, where: str):
    origin = typing.get_origin(hint)
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(hint)):
        if raw.strip().lower() in ("", "none"):
            return None
        hint = args[0]
    try:
        if hint is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {hint.__name__}") from None
    return raw


def load_config(path) -> RunConfig:
    """Read an INI config, or the ``config`` block of a run manifest (``*.json``)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    base = str(path.parent)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        return RunConfig.from_dict(doc.get("config", doc), base)
    return RunConfig.from_ini(path.read_text(), base)


def desk_config(**overrides) -> RunConfig:
    """Settings that train the models at synthetic desk scale in seconds rather than hours.

    The default learning rate of 1e-5 with 100 epochs is tuned for full
    datasets; on a few thousand samples SGD needs a far larger step.
    """
    stream = StreamConfig(
        batch_size=100, mode=Mode.OMLOG, seed=0,
        model=ModelConfig(h=5, embed_dim=8, hidden_size=32, top_k=2),
        train=nn.SgdConfig(learning_rate=1.0, epochs=20, eval_every=5, batch_size=64),
        normality=NormalityConfig(sgd=nn.SgdConfig(learning_rate=0.5, epochs=30, eval_every=10, batch_size=32)),
        episode=EpisodeConfig(tasks_per_batch=10, support_size=10, inner_epochs=5, inner_lr=0.5, batch_size=64),
    )
    cfg = RunConfig(stream=stream)
    for key, value in overrides.items():
        setattr(cfg.data, key, value)
    return cfg

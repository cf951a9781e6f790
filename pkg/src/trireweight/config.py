"""Sectioned ``key = value`` configuration files.

::

    [run]
    seed = 0
    [sim]
    gamma = 0.3
    [trainer]
    T = 2000

Sections map onto the dataclass configs; unknown sections or keys are errors.
``TRIREWEIGHT_<SECTION>_<KEY>`` environment variables override file values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .datasim import ConfigError, SimConfig
from .losses import LossConfig
from .models import ModelConfig
from .trainer import TrainerConfig

ENV_PREFIX = "TRIREWEIGHT_"


class ConfigFileError(ConfigError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    seeds: str = "0,1,2,3,4"

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"run.seeds must be comma-separated integers, got {self.seeds!r}")


@dataclass(frozen=True)
class VerifyConfig:
    n_mc: int = 100_000
    n_values: str = "50,100,200,400,800"
    n_eval: int = 100_000
    relaxed: bool = False
    min_ranking_quality: float = 0.5
    ordering_tol: float = 1e-3

    def n_list(self) -> list[int]:
        try:
            return [int(s) for s in self.n_values.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"verify.n_values must be comma-separated integers")


# TrainerConfig's nested configs and seed live in their own sections
_TRAINER_SKIP = {"loss", "model", "seed"}
SECTIONS: dict[str, type] = {"run": RunConfig, "sim": SimConfig, "trainer": TrainerConfig,
                             "loss": LossConfig, "model": ModelConfig, "verify": VerifyConfig}


def _fields(section: str) -> dict[str, type]:
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        if section == "trainer" and f.name in _TRAINER_SKIP:
            continue
        if section == "sim" and f.name == "seed":
            continue
        if section == "model" and f.name in ("D", "c"):
            continue
        out[f.name] = hints[f.name]
    return out


def _parse_value(text: str, typ, key: str, line: int | None):
    text = text.strip()
    optional = typing.get_origin(typ) in (typing.Union, getattr(__import__("types"), "UnionType",
                                                                 None))
    if optional:
        if text.lower() == "none":
            return None
        typ = next(a for a in typing.get_args(typ) if a is not type(None))
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {text!r} as {typ.__name__}", line, key)
    raise ConfigFileError(f"{key}: unsupported field type {typ}", line, key)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Config:
    run: RunConfig = field(default_factory=RunConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_seed(self, seed: int) -> "Config":
        return dataclasses.replace(
            self, run=dataclasses.replace(self.run, seed=seed),
            sim=self.sim.replace(seed=seed), trainer=self.trainer.replace(seed=seed))

    def to_text(self) -> str:
        """Canonical serialization; parsing it back yields an equal Config."""
        blocks = {"run": self.run, "sim": self.sim, "trainer": self.trainer,
                  "loss": self.trainer.loss, "model": self.trainer.model, "verify": self.verify}
        lines = []
        for section, obj in blocks.items():
            lines.append(f"[{section}]")
            for name in _fields(section):
                lines.append(f"{name} = {_format_value(getattr(obj, name))}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"run": dataclasses.asdict(self.run), "sim": dataclasses.asdict(self.sim),
                "trainer": dataclasses.asdict(self.trainer),
                "verify": dataclasses.asdict(self.verify)}

    def run_id(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def parse_config(text: str, env: Mapping[str, str] | None = None) -> Config:
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigFileError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigFileError(f"unknown section [{section}]", lineno, section)
            continue
        if "=" not in line:
            raise ConfigFileError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigFileError("key outside of any section", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        fields = _fields(section)
        if key not in fields:
            raise ConfigFileError(f"unknown key {section}.{key}", lineno, f"{section}.{key}")
        if key in values[section]:
            raise ConfigFileError(f"duplicate key {section}.{key}", lineno, f"{section}.{key}")
        values[section][key] = _parse_value(val, fields[key], f"{section}.{key}", lineno)

    env = os.environ if env is None else env
    for section in SECTIONS:
        for key, typ in _fields(section).items():
            name = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
            if name in env:
                values[section][key] = _parse_value(env[name], typ, name, None)
    return build_config(values)


def build_config(values: Mapping[str, Mapping]) -> Config:
    try:
        run = RunConfig(**values.get("run", {}))
        seed = run.seed
        sim = SimConfig(**{**values.get("sim", {}), "seed": seed}).validate()
        loss = LossConfig(**values.get("loss", {})).validate()
        model = ModelConfig(**{**values.get("model", {}), "D": sim.D, "c": sim.c}).validate()
        trainer = TrainerConfig(**values.get("trainer", {}), loss=loss, model=model,
                                seed=seed).validate()
        verify = VerifyConfig(**values.get("verify", {}))
        run.seed_list()
        verify.n_list()
    except TypeError as exc:  # pragma: no cover - guarded by key checks above
        raise ConfigFileError(str(exc))
    if seed < 0 or seed >= 2**64:
        raise ConfigError("run.seed must be a 64-bit unsigned integer")
    return Config(run, sim, trainer, verify)


def load_config(path, env: Mapping[str, str] | None = None) -> Config:
    return parse_config(Path(path).read_text(), env)

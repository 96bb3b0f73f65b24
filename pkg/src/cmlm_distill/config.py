"""INI configuration: one section per component, plus ``--section.key=value`` overrides.

Sections and their keys mirror dataclass fields:

``[corpus]``         :class:`~cmlm_distill.synthetic.CorpusSpec`
``[model]``          student :class:`~cmlm_distill.transformer.ModelConfig`
``[teacher_model]``  teacher :class:`~cmlm_distill.transformer.ModelConfig`
``[teacher]``        :class:`~cmlm_distill.teacher.TeacherTrainConfig`
``[train]``          :class:`~cmlm_distill.trainer.TrainConfig`
``[experiment]``     :class:`ExperimentConfig`

``vocab_size`` is not configurable; it always comes from the vocabulary.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .errors import ConfigError
from .synthetic import CorpusSpec
from .teacher import TeacherTrainConfig
from .trainer import TrainConfig
from .transformer import ModelConfig


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    corpus_seed: int = 0
    test_beam: int = 4
    baseline_scale: float = 0.5
    variants: tuple[str, ...] = ("full", "small", "left_to_right")
    bucket_width: int = 5

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("experiment.seeds must list at least one seed")
        if not 0.0 < self.baseline_scale <= 1.0:
            raise ConfigError(f"baseline_scale must be in (0, 1], got {self.baseline_scale}")


DEFAULT_STUDENT_MODEL = ModelConfig(layers=2, d_model=64, heads=4, d_ff=128, dropout=0.1, vocab_size=1,
                                    max_len=64, dtype="float32")
DEFAULT_TEACHER_MODEL = DEFAULT_STUDENT_MODEL.replace(positional="sinusoidal", layers=2)
# Desk-scale schedules: a few minutes per model on one core.
DEFAULT_TEACHER_TRAIN = TeacherTrainConfig(lr=3e-3, warmup_steps=150, total_steps=2000, eval_every=500)
DEFAULT_TRAIN = TrainConfig(lr=1.0, warmup_steps=400, total_steps=1200, eval_every=200)

SECTIONS: dict[str, Any] = {
    "corpus": CorpusSpec(),
    "model": DEFAULT_STUDENT_MODEL,
    "teacher_model": DEFAULT_TEACHER_MODEL,
    "teacher": DEFAULT_TEACHER_TRAIN,
    "train": DEFAULT_TRAIN,
    "experiment": ExperimentConfig(),
}
_HIDDEN = {"model": {"vocab_size"}, "teacher_model": {"vocab_size"}}


def valid_keys(section: str) -> list[str]:
    fields = dataclasses.fields(SECTIONS[section])
    return [f.name for f in fields if f.name not in _HIDDEN.get(section, ())]


def _parse(raw: str, default: Any, where: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


@dataclass(frozen=True)
class Settings:
    corpus: CorpusSpec
    model: ModelConfig
    teacher_model: ModelConfig
    teacher: TeacherTrainConfig
    train: TrainConfig
    experiment: ExperimentConfig

    def to_ini(self) -> str:
        out = []
        for section in SECTIONS:
            out.append(f"[{section}]")
            obj = getattr(self, section)
            out += [f"{k} = {_format(getattr(obj, k))}" for k in valid_keys(section)]
            out.append("")
        return "\n".join(out)

    def with_seed(self, seed: int) -> Settings:
        return dataclasses.replace(self, teacher=dataclasses.replace(self.teacher, seed=seed),
                                   train=self.train.replace(seed=seed))


def parse_override(arg: str) -> tuple[str, str, str]:
    """``--section.key=value`` -> (section, key, value)."""
    body = arg[2:] if arg.startswith("--") else arg
    name, sep, value = body.partition("=")
    section, dot, key = name.partition(".")
    if not sep or not dot:
        raise ConfigError(f"override {arg!r} must look like --section.key=value")
    return section, key, value


def load_settings(path: str | Path | None = None, overrides: Sequence[str] = ()) -> Settings:
    """Defaults, then the INI file at ``path``, then the overrides, in that order."""
    values: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case
        if not parser.read(path, encoding="utf-8"):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            values.setdefault(section, {}).update(parser[section])
    for arg in overrides:
        section, key, value = parse_override(arg)
        values.setdefault(section, {})[key] = value

    built = {}
    for section, entries in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; valid sections: {', '.join(SECTIONS)}")
        default = SECTIONS[section]
        keys = valid_keys(section)
        changes = {}
        for key, raw in entries.items():
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}; valid keys: {', '.join(keys)}")
            changes[key] = _parse(raw, getattr(default, key), f"{section}.{key}")
        try:
            built[section] = dataclasses.replace(default, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    return Settings(**built)

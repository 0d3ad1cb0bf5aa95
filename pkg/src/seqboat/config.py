"""Run configuration files.

Flat ``key = value`` lines grouped under ``[task]``, ``[model]``, ``[train]``
and ``[bench]`` sections (INI syntax, read with :mod:`configparser`). Keys map
one-to-one onto the fields of :class:`TaskSpec`, :class:`ModelConfig`,
:class:`TrainConfig` and :class:`BenchConfig`. ``model.vocab`` and
``model.max_len`` default to the task's values.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .tasks import TaskSpec, data_source
from .training import TrainConfig


@dataclass
class BenchConfig:
    seq_len: int = 256
    batch_size: int = 4
    steps: int = 50
    warmup: int = 5
    rates: str = "0,0.25,0.5,1"

    def rate_list(self) -> list[float]:
        return [float(x) for x in self.rates.split(",") if x.strip()]


@dataclass
class RunConfig:
    task: TaskSpec
    model: ModelConfig
    train: TrainConfig
    bench: BenchConfig = field(default_factory=BenchConfig)


REQUIRED = {"task": ("kind",), "model": ("n_layers", "d_m"), "train": ("steps",)}
SECTIONS = {"task": TaskSpec, "model": ModelConfig, "train": TrainConfig, "bench": BenchConfig}


class ConfigError(ValueError):
    pass


def _locate(text: str, section: str, key: str | None) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return lineno
            continue
        if current == section and key is not None and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return lineno
    return None


def _where(path, text, section, key=None) -> str:
    line = _locate(text, section, key)
    loc = f"{path}:{line}" if line else str(path)
    return f"{loc}: [{section}]" + (f" {key}" if key else "")


def _convert(raw: str, tp, label: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(tp)):
        if raw.strip().lower() in ("", "none"):
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    if tp is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{label}: expected a boolean, got {raw!r}")
    try:
        return tp(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{label}: expected {tp.__name__}, got {raw!r}") from exc


def _build(cls, section: str, values: dict, path, text):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, raw in values.items():
        label = _where(path, text, section, key)
        if key not in names:
            raise ConfigError(f"{label}: unknown field")
        kwargs[key] = _convert(raw, hints[key], label)
    return kwargs


def parse_config(text: str, path: str | Path = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{_where(path, text, section)}: unknown section")
    for section, keys in REQUIRED.items():
        if not parser.has_section(section):
            raise ConfigError(f"{path}: missing required section [{section}] (needs {', '.join(keys)})")
        for key in keys:
            if key not in parser[section]:
                raise ConfigError(f"{_where(path, text, section)}: missing required field {key!r}")
    parts = {s: _build(SECTIONS[s], s, dict(parser[s]) if parser.has_section(s) else {}, path, text) for s in SECTIONS}
    try:
        task = TaskSpec(**parts["task"])
        if task.kind == "char_lm" and task.corpus and not Path(task.corpus).is_absolute():
            task = dataclasses.replace(task, corpus=str(Path(path).parent / task.corpus))
    except ValueError as exc:
        raise ConfigError(f"{_where(path, text, 'task')}: {exc}") from exc
    model_kw = parts["model"]
    if "vocab" not in model_kw:
        try:
            model_kw["vocab"] = data_source(task).model_vocab
        except ValueError as exc:
            raise ConfigError(f"{_where(path, text, 'task')}: {exc}") from exc
    model_kw.setdefault("max_len", task.seq_len + task.context)
    model_kw.setdefault("causal", task.causal)
    for section, cls, kw in (("model", ModelConfig, model_kw), ("train", TrainConfig, parts["train"]), ("bench", BenchConfig, parts["bench"])):
        try:
            parts[section] = cls(**kw)
        except ValueError as exc:
            raise ConfigError(f"{_where(path, text, section)}: {exc}") from exc
    if parts["model"].w > task.seq_len:
        raise ConfigError(f"{_where(path, text, 'model', 'w')}: window {parts['model'].w} exceeds seq_len {task.seq_len}")
    return RunConfig(task, parts["model"], parts["train"], parts["bench"])


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    return parse_config(text, path)

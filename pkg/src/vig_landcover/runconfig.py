"""
Plain-text run configuration::

    # comment
    [model]
    stage_dims = 32, 64, 128
    k = 4

    [train]
    max_epochs = 50

    [data]
    manifest = data/manifest.txt
    split_seed = 0

    [output]
    dir = runs/demo

Unknown sections and keys are rejected with the offending line number.
Model fields describing the data (channels, grid, classes, task) default to
the manifest header.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError
from .model import ModelConfig
from .training import TrainConfig


def _ints(v: str) -> tuple:
    return tuple(int(x) for x in v.replace(",", " ").split())


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in v.replace(",", " ").split())


def _names(v: str) -> list:
    return [x.strip() for x in v.split(",") if x.strip()]


MODEL_KEYS = {
    "in_channels": int, "input_hw": _ints, "num_classes": int, "task": str,
    "stage_dims": _ints, "stage_depths": _ints, "heads": int, "k": int,
    "head_hidden": int, "dropout": float,
}
TRAIN_KEYS = {
    "max_epochs": int, "lr": float, "weight_decay": float, "betas": _floats, "eps": float,
    "es_patience": int, "es_tolerance": float, "plateau_patience": int,
    "plateau_factor": float, "batch_size": int, "seed": int,
}
DATA_KEYS = {"manifest": str, "bands": _names, "split_seed": int, "fractions": _floats}
OUTPUT_KEYS = {"dir": str}
SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "data": DATA_KEYS, "output": OUTPUT_KEYS}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    base_dir: str = "."

    def manifest_path(self) -> str:
        path = self.data.get("manifest")
        if not path:
            raise ConfigurationError("[data] manifest is required")
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train).validate()

    def model_config(self, manifest=None) -> ModelConfig:
        values = dict(self.model)
        if manifest is not None:
            values.setdefault("in_channels", manifest.channels)
            values.setdefault("input_hw", (manifest.height, manifest.width))
            values.setdefault("num_classes", manifest.classes)
            values.setdefault("task", manifest.task)
        missing = [k for k in ("in_channels", "input_hw", "num_classes") if k not in values]
        if missing:
            raise ConfigurationError(f"[model] needs {', '.join(missing)} (or a manifest to derive them from)")
        return ModelConfig(**values).validate()

    def split_seed(self) -> int:
        return self.data.get("split_seed", 0)

    def fractions(self) -> tuple:
        return tuple(self.data.get("fractions", (0.70, 0.15, 0.15)))


def parse_run_config(text: str, base_dir: str = ".") -> RunConfig:
    cfg = RunConfig(base_dir=base_dir)
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigurationError(f"line {lineno}: unknown section [{section}]")
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigurationError(f"line {lineno}: key {key!r} appears before any [section]")
        converters = SECTIONS[section]
        if key not in converters:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r} in [{section}]")
        try:
            getattr(cfg, section)[key] = converters[key](value)
        except ValueError:
            raise ConfigurationError(f"line {lineno}: bad value {value!r} for {key!r}") from None
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_run_config(text, os.path.dirname(os.path.abspath(path)))


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def render_resolved(model: ModelConfig, train: TrainConfig, data: dict, out_dir: str) -> str:
    """Fully-expanded config in the same format the parser reads."""
    lines = ["[model]"]
    lines += [f"{f.name} = {_fmt(getattr(model, f.name))}" for f in fields(model)]
    lines += ["", "[train]"]
    lines += [f"{f.name} = {_fmt(getattr(train, f.name))}" for f in fields(train)]
    lines += ["", "[data]"]
    lines += [f"{k} = {_fmt(v)}" for k, v in data.items() if v is not None]
    lines += ["", "[output]", f"dir = {out_dir}"]
    return "\n".join(lines) + "\n"

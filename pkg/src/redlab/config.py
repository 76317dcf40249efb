"""Strict JSON experiment configuration."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .model import TransformerConfig
from .peft import PeftSpec
from .tasks import SyntheticTask
from .train import TrainConfig

SECTIONS = ("model", "peft", "train", "task", "output_dir")


class ConfigError(ValueError):
    """The experiment config is missing, unreadable or invalid."""


@dataclass
class ExperimentConfig:
    model: TransformerConfig
    peft: PeftSpec
    train: TrainConfig
    task: SyntheticTask
    output_dir: str | None = None

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "peft": self.peft.to_dict(),
            "train": self.train.to_dict(),
            "task": self.task.to_dict(),
            "output_dir": self.output_dir,
        }

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["train"]["seed"] = seed
        d["task"]["seed"] = seed
        return from_dict(d)

    def with_peft(self, spec: PeftSpec) -> "ExperimentConfig":
        d = self.to_dict()
        d["peft"] = spec.to_dict()
        return from_dict(d)


def _section(raw: dict, key: str, required=True) -> dict:
    if key not in raw:
        if required:
            raise ConfigError(f"config is missing the {key!r} section")
        return {}
    val = raw[key]
    if not isinstance(val, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    return dict(val)


def from_dict(raw: dict) -> ExperimentConfig:
    """Validate everything up front; unknown keys anywhere are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        model = TransformerConfig.from_dict(_section(raw, "model"))
        peft = PeftSpec.from_dict(_section(raw, "peft"))
        train = TrainConfig.from_dict(_section(raw, "train", required=False))
        task_raw = _section(raw, "task", required=False)
        # The data stream follows the master seed unless the task pins its own.
        task_raw.setdefault("seed", train.seed)
        task = SyntheticTask.from_dict(task_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if task.vocab_size != model.vocab_size:
        raise ConfigError(f"task.vocab_size={task.vocab_size} differs from model.vocab_size={model.vocab_size}")
    if task.n_classes != model.n_classes:
        raise ConfigError(f"task.n_classes={task.n_classes} differs from model.n_classes={model.n_classes}")
    if task.seq_len > model.max_seq_len:
        raise ConfigError(f"task.seq_len={task.seq_len} exceeds model.max_seq_len={model.max_seq_len}")
    out = raw.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output_dir must be a string")
    return ExperimentConfig(model, peft, train, task, out)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    try:
        return from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None

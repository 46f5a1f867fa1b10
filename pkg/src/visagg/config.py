"""Run configuration files.

A config is a JSON object with up to four sections::

    {"pipeline": {...}, "tracker": {...}, "model": {...}, "train": {...}}

Keys map one-to-one onto :class:`PipelineConfig`, the tracker
hyperparameters, the model shape and :class:`TrainConfig`. Anything else is
rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .pipeline import ModelParams, PipelineConfig
from .tensor import ContractError
from .training import TrainConfig

TRACKER_KEYS = {"new_identity_threshold", "cue_weights", "sigma_factor", "map_pool", "map_grid",
                "window_sigma"}
MODEL_KEYS = {"channels", "stride", "num_categories", "seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    tracker: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=0))

    def build_params(self) -> ModelParams:
        tk = dict(self.tracker)
        if "cue_weights" in tk:
            tk["cue_weights"] = tuple(tk["cue_weights"])
        return ModelParams.init(**self.model, **tk)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with every seed replaced by ``seed``."""
        p = {f.name: getattr(self.pipeline, f.name) for f in fields(PipelineConfig)}
        t = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        p["seed"], t["seed"] = seed, seed
        return RunConfig(PipelineConfig(**p), dict(self.tracker), {**self.model, "seed": seed},
                         TrainConfig(**t))


def _check_keys(section: str, got: dict, allowed: set[str]) -> None:
    if not isinstance(got, dict):
        raise ConfigError(f"section {section!r} must be an object")
    extra = sorted(set(got) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(extra)}")


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("<top level>", doc, {"pipeline", "tracker", "model", "train"})
    pipe = doc.get("pipeline", {})
    _check_keys("pipeline", pipe, PipelineConfig.field_names())
    _check_keys("tracker", doc.get("tracker", {}), TRACKER_KEYS)
    _check_keys("model", doc.get("model", {}), MODEL_KEYS)
    tr = doc.get("train", {})
    _check_keys("train", tr, TRAIN_KEYS)
    try:
        train = TrainConfig(**{"steps": 0, **tr})
        if "weights" in tr:
            train.weights = {**TrainConfig().weights, **tr["weights"]}
        rc = RunConfig(PipelineConfig(**pipe), dict(doc.get("tracker", {})), dict(doc.get("model", {})),
                       train)
        rc.build_params()  # surface bad tracker/model values now
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return rc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)

"""Run-configuration documents.

A run config is a JSON object with optional sections:

    {
      "seed": 0,
      "stage":     {"steps": ..., "batch_size": ..., "threads": ...},
      "sampling":  {"n_samples": ..., "p_self": ...},
      "optimizer": {"lr": ...},
      "weights":   {"rec": ..., "mouth": ..., ...},
      "data":      {... dataset generation / split fields ...},
      "model":     {... model architecture fields ...}
    }

Anything omitted falls back to the stage presets / dataclass defaults.
"""

from __future__ import annotations

import json
from pathlib import Path

from .pipeline import ModelConfig
from .synthdata import DatasetConfig
from .training import StageConfig, stage_preset

_STAGE_KEYS = ("steps", "batch_size", "log_every", "probe_every",
               "checkpoint_every", "threads", "val_clips_per_identity")
_SAMPLING_KEYS = ("n_samples", "p_self")
_OPTIMIZER_KEYS = ("lr",)


def load_run_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"run config must be a JSON object, got {type(doc).__name__}")
    return doc


def make_stage_config(stage: str, doc: dict, **overrides) -> StageConfig:
    fields: dict = {}
    section = doc.get("stage", {})
    for key in _STAGE_KEYS:
        if key in section:
            fields[key] = section[key]
    for key in _SAMPLING_KEYS:
        if key in doc.get("sampling", {}):
            fields[key] = doc["sampling"][key]
    for key in _OPTIMIZER_KEYS:
        if key in doc.get("optimizer", {}):
            fields[key] = doc["optimizer"][key]
    if "val_clips_per_identity" in doc.get("data", {}):
        fields["val_clips_per_identity"] = doc["data"]["val_clips_per_identity"]
    if "weights" in doc:
        fields["weights"] = dict(doc["weights"])
    if "seed" in doc:
        fields["seed"] = doc["seed"]
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return stage_preset(stage, **fields)


def make_model_config(doc: dict, seed: int | None = None) -> ModelConfig:
    fields = dict(doc.get("model", {}))
    if seed is not None and "init_seed" not in fields:
        fields["init_seed"] = seed
    return ModelConfig(**fields)


def make_dataset_config(doc: dict, **overrides) -> DatasetConfig:
    fields = dict(doc.get("data", {}))
    fields.pop("val_clips_per_identity", None)   # training-side split knob
    if "seed" in doc and "seed" not in fields:
        fields["seed"] = doc["seed"]
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return DatasetConfig.from_dict(fields)

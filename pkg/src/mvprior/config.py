"""Training/model configuration and the key-value config file format.

Config files are plain text: one `key = value` per line, `#` starts a
comment.  Keys match the TrainConfig/SynthConfig field names; unknown keys
are rejected.  Example:

    total_steps = 2000
    lr_start = 2e-4
    mvcm_resolution = feature
    synth.size = 64
    synth.coverage = 0.9
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import DataError
from .synth import SynthConfig


@dataclass
class TrainConfig:
    lr_start: float = 1e-4
    lr_end: float = 8.5e-5
    weight_decay: float = 5e-5
    adam_eps: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 2
    total_steps: int = 2000
    train_iters: int = 4
    eval_iters: int = 16
    crop_h: int = 64
    crop_w: int = 64
    loss_gamma: float = 0.8
    seed: int = 0
    mvcm_resolution: str = "feature"
    hflip: bool = False

    def validate(self):
        if self.lr_end > self.lr_start:
            raise ValueError(f"lr_end {self.lr_end} must be <= lr_start {self.lr_start}")
        if self.train_iters < 1:
            raise ValueError("train_iters must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        for f in ("lr_start", "lr_end", "batch_size", "eval_iters", "crop_h", "crop_w", "loss_gamma"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.weight_decay < 0 or self.adam_eps <= 0:
            raise ValueError("bad optimizer constants")
        if self.mvcm_resolution not in ("full", "feature"):
            raise ValueError(f"mvcm_resolution must be 'full' or 'feature', got {self.mvcm_resolution!r}")


@dataclass
class ModelConfig:
    window_radius: int = 3
    feature_scale: int = 4
    corr_radius: int = 3
    mvcm_resolution: str = "feature"

    def validate(self):
        if self.window_radius < 1 or self.corr_radius < 1:
            raise ValueError("radii must be >= 1")
        if self.feature_scale != 4:
            raise ValueError("feature_scale is fixed at 4 by the feature stack")
        if self.mvcm_resolution not in ("full", "feature"):
            raise ValueError(f"bad mvcm_resolution {self.mvcm_resolution!r}")


def model_config_from_train(tc):
    return ModelConfig(mvcm_resolution=tc.mvcm_resolution)


def _coerce(field, raw):
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("bool", bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"bad boolean {raw!r}")
    return raw


def parse_config_file(path):
    """Parse a key-value config file into {key: string}."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if not key or not val:
                raise DataError(f"{path}:{n}: empty key or value")
            out[key] = val
    return out


def apply_config(entries, train_cfg=None, synth_cfg=None):
    """Apply parsed entries onto TrainConfig and SynthConfig instances.

    Keys prefixed `synth.` address the synthetic-data config.  Returns the
    (train_cfg, synth_cfg) pair; unknown keys raise DataError.
    """
    train_cfg = train_cfg or TrainConfig()
    synth_cfg = synth_cfg or SynthConfig()
    tfields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    sfields = {f.name: f for f in dataclasses.fields(SynthConfig)}
    for key, raw in entries.items():
        if key.startswith("synth."):
            name = key[len("synth."):]
            if name not in sfields:
                raise DataError(f"unknown config key {key!r}")
            try:
                setattr(synth_cfg, name, _coerce(sfields[name], raw))
            except ValueError as e:
                raise DataError(f"config key {key!r}: {e}") from e
        else:
            if key not in tfields:
                raise DataError(f"unknown config key {key!r}")
            try:
                setattr(train_cfg, key, _coerce(tfields[key], raw))
            except ValueError as e:
                raise DataError(f"config key {key!r}: {e}") from e
    train_cfg.validate()
    synth_cfg.validate()
    return train_cfg, synth_cfg

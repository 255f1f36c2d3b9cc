"""Dataclass configs, shipped presets, and layered config loading.

Precedence is defaults < config file < command-line overrides. Config files
are YAML with optional ``model``, ``train`` and ``data`` sections.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import UsageError

SAMPLE_RATE = 16000
HOP_LENGTH = 160  # 10 ms
WIN_LENGTH = 640  # 40 ms
N_MELS = 80
VIDEO_FPS = 25
MEL_PER_VIDEO = 4
FRAME_SIZE = 112


@dataclass
class ModelConfig:
    d_model: int = 384
    n_heads: int = 6
    enc_layers: int = 4
    dec_layers: int = 4
    conv_kernel: int = 15
    ff_mult: int = 4
    dropout: float = 0.1
    K: int = 200
    n_speakers: int = 33
    mel_bands: int = N_MELS
    # ResNet18 trunk base width; 64 gives the standard 512-wide 1x1 map.
    frontend_channels: int = 64
    variance_kernel: int = 3
    variance_channels: int | None = None
    decoder_speaker: bool = False
    closed_set: bool = True
    # affine map applied to energy before its embedding conv
    energy_mean: float = 0.0
    energy_std: float = 1.0
    # post-net
    n_flow_steps: int = 8
    flow_hidden: int = 192
    flow_layers: int = 4
    flow_kernel: int = 5
    flow_residual: bool = True
    flow_detach_cond: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise UsageError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name in ("d_model", "n_heads", "K", "n_speakers", "mel_bands", "n_flow_steps"):
            if getattr(self, name) <= 0:
                raise UsageError(f"{name} must be positive")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    weight_decay: float = 1e-6
    batch_size: int = 64
    window_length: int = 50
    epochs: int = 400
    lambda_var: float = 0.1
    lambda_post: float = 0.1
    seed: int = 0
    grad_clip: float | None = 1.0
    loss_reduction: str = "sum"  # "sum" over frames or "mean"
    flow_reduction: str = "mean"  # per-element mean or "sum"
    augment: bool = True
    deterministic: bool = True
    val_every: int = 1
    checkpoint_every: int = 10
    pad_short: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr < 0 or self.batch_size <= 0 or self.window_length <= 0:
            raise UsageError("lr must be >= 0, batch_size and window_length > 0")
        if self.loss_reduction not in ("sum", "mean"):
            raise UsageError(f"loss_reduction must be sum|mean, got {self.loss_reduction!r}")
        if self.flow_reduction not in ("sum", "mean"):
            raise UsageError(f"flow_reduction must be sum|mean, got {self.flow_reduction!r}")


PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "grid": {
        "model": dict(d_model=384, n_heads=6, n_speakers=33),
        "train": dict(window_length=50, epochs=400, batch_size=64),
    },
    "lip2wav": {
        "model": dict(d_model=512, n_heads=8, n_speakers=2),
        "train": dict(window_length=75, epochs=900, batch_size=64),
    },
}


def preset(name: str) -> tuple[ModelConfig, TrainConfig]:
    try:
        p = PRESETS[name.lower()]
    except KeyError:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(**p["model"]), TrainConfig(**p["train"])


def _coerce(cls, values: Mapping[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return values


def merge(base, overrides: Mapping[str, Any] | None):
    """Return a copy of dataclass ``base`` with ``overrides`` applied (None values skipped)."""
    if not overrides:
        return dataclasses.replace(base)
    clean = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(base, **_coerce(type(base), clean))


def load_config_file(path: str | Path) -> dict[str, dict[str, Any]]:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must be a mapping")
    bad = set(raw) - {"preset", "model", "train", "data"}
    if bad:
        raise UsageError(f"unknown config sections in {path}: {sorted(bad)}")
    return raw


def resolve(config_path: str | Path | None = None,
            model_overrides: Mapping[str, Any] | None = None,
            train_overrides: Mapping[str, Any] | None = None,
            preset_name: str | None = None) -> tuple[ModelConfig, TrainConfig]:
    file_cfg = load_config_file(config_path) if config_path else {}
    name = preset_name or file_cfg.get("preset")
    mcfg, tcfg = preset(name) if name else (ModelConfig(), TrainConfig())
    mcfg = merge(mcfg, file_cfg.get("model"))
    tcfg = merge(tcfg, file_cfg.get("train"))
    return merge(mcfg, model_overrides), merge(tcfg, train_overrides)


def to_dict(cfg) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

"""Experiment configuration tree, JSON round-tripping, and the two presets.

``desk_config`` is the CPU-minutes default every experiment runs at.
``table5_model_config`` reproduces the reference scale (3-layer, 256-wide,
4-head transformers over 30-step contexts with a ~11M-parameter vision
backbone) for parameter audits and smoke tests.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import get_type_hints

from .encoders import EncoderConfig
from .env import EnvConfig
from .errors import ContractError
from .model import PlexConfig
from .training import TrainConfig
from .transformer import TransformerConfig


@dataclass
class DataConfig:
    n_train_tasks: int = 8
    n_target_tasks: int = 2
    mtvd_per_task: int = 100
    vmt_per_task: int = 75
    ttd_count: int = 10
    ttd_pool: int = 75
    vmt_noise_std: float = 0.5
    task_seed: int = 7


@dataclass
class EvalConfig:
    episodes_per_task: int = 20  # paper-scale protocol uses 50; see --full-eval
    max_steps: int = 100


@dataclass
class AblationConfig:
    sizes: tuple = (5, 10, 25)
    modes: tuple = ("relative", "absolute", "global", "global_returns")
    seeds: tuple = (0, 1, 2)
    style: str = "humanlike"
    task_index: int = 0  # index into the target split


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: PlexConfig = field(default_factory=PlexConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    pretrain_executor: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6, steps_per_epoch=100))
    pretrain_planner: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=8, steps_per_epoch=100))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=8, steps_per_epoch=40))
    bc: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5, steps_per_epoch=80))
    seed: int = 0


_DATACLASS_FIELDS = (
    EnvConfig,
    PlexConfig,
    TransformerConfig,
    EncoderConfig,
    DataConfig,
    EvalConfig,
    AblationConfig,
    TrainConfig,
    ExperimentConfig,
)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, payload: dict):
    if not isinstance(payload, dict):
        raise ContractError(f"expected a mapping for {cls.__name__}, got {type(payload).__name__}")
    kwargs = {}
    defaults = cls()
    for f in dataclasses.fields(cls):
        if f.name not in payload:
            kwargs[f.name] = getattr(defaults, f.name)
            continue
        value = payload[f.name]
        current = getattr(defaults, f.name)
        if dataclasses.is_dataclass(current):
            kwargs[f.name] = _build(type(current), value)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[f.name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[f.name] = value
    unknown = set(payload) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ContractError(f"unknown fields for {cls.__name__}: {sorted(unknown)}")
    return cls(**kwargs)


def from_dict(payload: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, payload)


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return from_dict(json.load(f))


def desk_config(seed: int = 0) -> ExperimentConfig:
    cfg = ExperimentConfig(seed=seed)
    return cfg


def table5_model_config() -> PlexConfig:
    """Reference-scale model: 3/3 layers, h=256, 4 heads, K=30/30, relative
    encoding, and a vision backbone matching the reference encoder's ~11M
    parameter budget (one camera)."""
    channels = (64, 64, 64, 64, 128, 128, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512)
    strides = (1, 1, 1, 1, 2, 1, 1, 1, 2, 1, 1, 1, 2, 1, 1, 1)
    enc = EncoderConfig(
        conv_channels=channels,
        conv_strides=strides,
        mlp_hidden=(64,),
        proprio_dim=18,
        action_dim=4,
    )
    return PlexConfig(
        hidden_dim=256,
        planner=TransformerConfig(3, 4, 256, context_size=30, pos_mode="relative", t_max=512),
        executor=TransformerConfig(3, 4, 256, context_size=30, pos_mode="relative", t_max=512),
        encoder=enc,
        lookahead=1,
        use_returns=False,
    )

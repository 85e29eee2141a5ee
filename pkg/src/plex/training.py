"""Staged optimization: executor pretraining, planner pretraining, finetuning.

Ordering rule: with trainable encoders, the planner may only be pretrained
after the executor (the planner predicts in the embedding space the executor's
loss is still shaping). With frozen encoders the stages are independent.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DivergenceError, StagedTrainingError
from .model import ContextWindow, PlexModel
from .nn import global_grad_norm
from .tensor import Tape, Tensor, backward
from .trajectory import Trajectory

FINETUNE_SCOPES = ("planner_last_layer", "planner_exec_last_layers_head", "full_bc")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    weight_decay: float = 1e-5
    epochs: int = 8
    steps_per_epoch: int = 100
    lookahead: int = 1
    warmup_steps: int = 100
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if min(self.learning_rate, self.batch_size, self.epochs, self.steps_per_epoch) <= 0:
            raise ContractError("rates, sizes and step counts must be positive")


@dataclass
class StageState:
    executor_pretrained: bool = False
    planner_pretrained: bool = False
    encoders_frozen: bool = False


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Parameters whose grad is None are skipped entirely (no decay, no moment
    update), which keeps untouched components bitwise identical.
    """

    def __init__(self, named_params: dict[str, Tensor], cfg: TrainConfig):
        self.params = dict(named_params)
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        cfg = self.cfg
        self.t += 1
        if cfg.grad_clip > 0:
            norm = global_grad_norm(self.params.values())
            if not math.isfinite(norm):
                raise DivergenceError(f"non-finite gradient norm at optimizer step {self.t}")
            scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
        else:
            scale = 1.0
        lr = cfg.learning_rate * min(1.0, self.t / cfg.warmup_steps) if cfg.warmup_steps > 0 else cfg.learning_rate
        b1, b2 = cfg.beta1, cfg.beta2
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {n} at step {self.t}")
            g = g * scale
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * (g * g)
            mhat = self.m[n] / (1 - b1**self.t)
            vhat = self.v[n] / (1 - b2**self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + cfg.eps) - lr * cfg.weight_decay * p.data


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def sample_batch(
    trajectories: Sequence[Trajectory],
    model: PlexModel,
    batch_size: int,
    rng: np.random.Generator,
    need_planner: bool = True,
    need_executor: bool = True,
) -> list[tuple[Optional[ContextWindow], Optional[ContextWindow]]]:
    """Uniformly sample trajectories, then a window end-point per trajectory.

    Windows never cross trajectory boundaries; shorter histories are
    left-padded with masked slots.
    """
    if not trajectories:
        raise ContractError("cannot sample from an empty dataset")
    out = []
    for _ in range(batch_size):
        traj = trajectories[int(rng.integers(0, len(trajectories)))]
        t_end = int(rng.integers(1, traj.length + 1))
        pw = model.planner_context(traj, t_end) if need_planner else None
        ew = model.executor_context(traj, t_end=t_end) if need_executor else None
        out.append((pw, ew))
    return out


# ---------------------------------------------------------------------------
# stage loops
# ---------------------------------------------------------------------------


def _trainable_names(model: PlexModel, stage: StageState, scope_names: Optional[list[str]]) -> list[str]:
    names = [n for n, _ in model.named_parameters()]
    if scope_names is not None:
        scope = set(scope_names)
        names = [n for n in names if n in scope]
    if stage.encoders_frozen:
        frozen = set(model.encoder_param_names())
        names = [n for n in names if n not in frozen]
    return names


def run_stage(
    model: PlexModel,
    trajectories: Sequence[Trajectory],
    cfg: TrainConfig,
    stage: StageState,
    loss_kind: str,
    scope_names: Optional[list[str]] = None,
    stage_label: str = "",
    after_epoch: Optional[Callable[[int, float], None]] = None,
) -> list[float]:
    """Generic optimization loop; returns per-epoch mean losses."""
    cfg.validate()
    need_planner = loss_kind in ("planner", "bc", "planner+executor")
    need_executor = loss_kind in ("executor", "bc", "planner+executor")
    named = dict(model.named_parameters())
    trainable = {n: named[n] for n in _trainable_names(model, stage, scope_names)}
    opt = AdamW(trainable, cfg)
    ss = np.random.SeedSequence([cfg.seed, zlib.crc32(stage_label.encode())])
    rng_batch, rng_fwd = [np.random.default_rng(s) for s in ss.spawn(2)]
    curve = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(cfg.steps_per_epoch):
            batch = sample_batch(trajectories, model, cfg.batch_size, rng_batch, need_planner, need_executor)
            opt.zero_grad()
            model.zero_grad()
            with Tape() as tape:
                if loss_kind == "planner":
                    loss = model.planner_loss_batch([pw for pw, _ in batch], train=True, rng=rng_fwd)
                elif loss_kind == "executor":
                    loss = model.executor_loss_batch([ew for _, ew in batch], train=True, rng=rng_fwd)
                elif loss_kind == "bc":
                    loss = model.bc_loss_batch([pw for pw, _ in batch], [ew for _, ew in batch], train=True, rng=rng_fwd)
                elif loss_kind == "planner+executor":
                    loss = model.planner_loss_batch([pw for pw, _ in batch], train=True, rng=rng_fwd) + model.executor_loss_batch(
                        [ew for _, ew in batch], train=True, rng=rng_fwd
                    )
                else:
                    raise ContractError(f"unknown loss kind {loss_kind!r}")
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite {loss_kind} loss in stage {stage_label!r}")
                backward(loss, tape)
            opt.step()
            total += value
        mean = total / cfg.steps_per_epoch
        curve.append(mean)
        if after_epoch is not None:
            after_epoch(epoch, mean)
    return curve


def pretrain_executor(
    model: PlexModel,
    d_vmt: Sequence[Trajectory],
    cfg: TrainConfig,
    stage: StageState,
    after_epoch: Optional[Callable[[int, float], None]] = None,
) -> list[float]:
    """Stage 1: inverse-dynamics training on visuomotor trajectories."""
    for traj in d_vmt:
        if not (traj.present["I"] and traj.present["p"] and traj.present["a"]):
            raise ContractError("executor pretraining needs image+proprio+action trajectories")
    curve = run_stage(model, d_vmt, cfg, stage, "executor", stage_label="pretrain_executor", after_epoch=after_epoch)
    stage.executor_pretrained = True
    return curve


def pretrain_planner(
    model: PlexModel,
    d_mtvd: Sequence[Trajectory],
    cfg: TrainConfig,
    stage: StageState,
    after_epoch: Optional[Callable[[int, float], None]] = None,
) -> list[float]:
    """Stage 2: prediction-loss training on task-conditioned video demos."""
    if not stage.encoders_frozen and not stage.executor_pretrained:
        raise StagedTrainingError(
            "planner pretraining with trainable encoders requires a pretrained executor; "
            "freeze the encoders to run stages independently"
        )
    for traj in d_mtvd:
        if not (traj.present["g"] and traj.present["I"]):
            raise ContractError("planner pretraining needs goal+image trajectories")
    curve = run_stage(model, d_mtvd, cfg, stage, "planner", stage_label="pretrain_planner", after_epoch=after_epoch)
    stage.planner_pretrained = True
    return curve


def finetune(
    model: PlexModel,
    d_ttd: Sequence[Trajectory],
    cfg: TrainConfig,
    stage: StageState,
    scope: str = "planner_last_layer",
    after_epoch: Optional[Callable[[int, float], None]] = None,
) -> dict:
    """Adapt a pretrained model on target-task demonstrations.

    Returns the loss curve plus the trainable-parameter fraction for the scope.
    """
    if scope not in FINETUNE_SCOPES:
        raise ContractError(f"scope must be one of {FINETUNE_SCOPES}")
    video_only = all(not t.present["a"] for t in d_ttd)
    if scope == "planner_last_layer":
        names = model.planner_last_block_names()
        loss_kind = "planner"
    elif scope == "planner_exec_last_layers_head":
        if video_only:
            raise ContractError("scope trains the executor; video-only demonstrations are insufficient")
        names = model.planner_last_block_names() + model.executor_last_block_names() + model.action_head_names()
        loss_kind = "planner+executor"
    else:  # full_bc
        if video_only:
            raise ContractError("behavior cloning needs full sensorimotor demonstrations")
        names = [n for n, _ in model.named_parameters()]
        loss_kind = "bc"
    total = model.num_parameters()
    named = dict(model.named_parameters())
    fraction = sum(named[n].data.size for n in names) / total
    curve = run_stage(
        model, d_ttd, cfg, stage, loss_kind, scope_names=names, stage_label=f"finetune_{scope}", after_epoch=after_epoch
    )
    return {"curve": curve, "trainable_fraction": fraction, "scope": scope}

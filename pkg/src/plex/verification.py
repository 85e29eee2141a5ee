"""Finite-difference verification of the full model losses at a tiny config.

Used by the ``gradcheck`` CLI verb and the acceptance suite: every loss is
rebuilt in double precision and compared coordinate-wise against central
differences.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .encoders import EncoderConfig
from .model import PlexConfig, PlexModel
from .tensor import grad_check
from .trajectory import Trajectory
from .transformer import TransformerConfig


def tiny_model(seed: int = 0, use_returns: bool = False, image_hw: int = 24) -> PlexModel:
    """h=8, 1 layer, 1 head, K=3 double-precision model for oracle sweeps."""
    cfg = PlexConfig(
        hidden_dim=8,
        planner=TransformerConfig(1, 1, 8, context_size=3, pos_mode="relative", t_max=64, dropout=0.0),
        executor=TransformerConfig(1, 1, 8, context_size=3, pos_mode="relative", t_max=64, dropout=0.0),
        encoder=EncoderConfig(image_hw=image_hw, mlp_hidden=(16,)),
        lookahead=1,
        use_returns=use_returns,
    )
    return PlexModel(cfg, seed=seed, dtype=np.float64)


def random_trajectory(rng: np.random.Generator, t: int = 3, image_hw: int = 24) -> Trajectory:
    return Trajectory(
        goal_image=rng.random((image_hw, image_hw, 3)),
        images=rng.random((t, image_hw, image_hw, 3)),
        proprio=rng.random((t, 2)),
        actions=rng.uniform(-0.9, 0.9, (t, 2)),
        returns=-np.arange(t, 0, -1).astype(np.float64),
    )


def full_model_grad_check(
    sample_per_param: int = 40,
    seed: int = 0,
    eps: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
) -> dict[str, float]:
    """Max relative FD error for each of the three losses at the tiny config."""
    model = tiny_model(seed=seed)
    traj = random_trajectory(np.random.default_rng(seed + 1))
    params = model.parameters()
    results = {}
    for name, fn in (
        ("planner_loss", lambda ps: model.planner_loss(traj)),
        ("executor_loss", lambda ps: model.executor_loss(traj)),
        ("bc_loss", lambda ps: model.bc_loss(traj)),
    ):
        results[name] = grad_check(fn, params, eps=eps, sample=sample_per_param, rng=np.random.default_rng(seed))
    return results

"""Closed-loop rollout evaluation and the best-epoch success protocol."""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .env import DemoPolicy, EnvConfig, TaskSpec, env_reset, env_step, is_success, render
from .errors import ContractError
from .model import PlexModel
from .tensor import Tensor
from .trajectory import Trajectory


class RandomAgent:
    """Uniform actions in [-1, 1]^2; the zero-knowledge baseline."""

    def __init__(self):
        self._rng = None

    def reset(self, task: TaskSpec, rng: np.random.Generator) -> None:
        self._rng = rng

    def act(self, image, proprio, last_reward=None) -> np.ndarray:
        return self._rng.uniform(-1.0, 1.0, size=2)


class ScriptedOracleAgent:
    """Wraps the scripted demonstrator; the upper-bound reference policy."""

    def __init__(self, env_cfg: EnvConfig):
        self.env_cfg = env_cfg
        self._policy = None
        self._task = None

    def reset(self, task: TaskSpec, rng: np.random.Generator) -> None:
        self._policy = DemoPolicy(task, self.env_cfg, style="scripted")
        self._task = task

    def act(self, image, proprio, last_reward=None) -> np.ndarray:
        # the scripted policy reads privileged state; rebuild it from proprio + task
        from .env import WorldState

        state = WorldState(
            agent_pos=np.asarray(proprio, dtype=np.float64),
            object_pos=self._object_pos,
            goal_pos=np.asarray(self._task.goal_pos, dtype=np.float64),
            task_kind=self._task.task_kind,
        )
        return self._policy(state)

    def observe_object(self, object_pos: np.ndarray) -> None:
        self._object_pos = np.asarray(object_pos, dtype=np.float64)


class PlexAgent:
    """Closed-loop policy with per-episode embedding caches.

    ``conditioning="planner"`` replans every step and feeds the predicted
    future embeddings to the executor. ``conditioning="goal_embedding"``
    substitutes the observation embedding of the task's goal image for every
    predicted-future slot (the executor-only baseline; the planner never runs).
    """

    def __init__(self, model: PlexModel, conditioning: str = "planner", return_range: Optional[tuple] = None):
        if conditioning not in ("planner", "goal_embedding"):
            raise ContractError(f"unknown conditioning {conditioning!r}")
        self.model = model
        self.conditioning = conditioning
        self.return_range = return_range
        self._reset_done = False

    def reset(self, task: TaskSpec, rng: np.random.Generator) -> None:
        m = self.model
        goal = task.goal_image[None]
        goal_obs = m.enc.encode_images(goal)
        self._goal_obs_emb = goal_obs.data[0]
        self._g_emb = m.enc.task_proj(goal_obs).data[0]
        self._i_cache: list[np.ndarray] = []
        self._p_cache: list[np.ndarray] = []
        self._aprev_cache: list[np.ndarray] = []
        self._rtg: list[float] = []
        self._last_action: Optional[np.ndarray] = None
        if self.model.cfg.use_returns and self.return_range is not None:
            lo, hi = self.return_range
            self._target_return = float(rng.uniform(lo, hi))
        else:
            self._target_return = None
        self._reset_done = True

    def _planner_predictions(self, n_steps: int) -> np.ndarray:
        m = self.model
        cfg = m.cfg
        h = cfg.hidden_dim
        k = cfg.planner.context_size
        n = min(n_steps, k)
        i_win = np.stack(self._i_cache[-n:])
        tps = cfg.planner_tokens_per_step
        tokens = [self._g_emb[None]]
        if cfg.use_returns:
            if self._target_return is not None:
                r_vals = np.asarray(self._rtg[-n:], dtype=np.float32)[:, None] / cfg.encoder.return_scale
                r_rows = (r_vals @ m.enc.reward.W.data) + m.enc.reward.b.data
            else:
                r_rows = np.tile(m.enc.placeholders.R.data, (n, 1))
            inter = np.stack([r_rows.astype(i_win.dtype), i_win], axis=1).reshape(2 * n, h)
            tokens.append(inter)
        else:
            tokens.append(i_win)
        toks = np.concatenate(tokens)[None]
        ts = np.concatenate([[0], np.repeat(np.arange(n_steps - n + 1, n_steps + 1), tps)])[None]
        out = m.planner.forward(Tensor(toks), timesteps=ts)
        preds = m.planner_head(out[:, tps::tps])
        return preds.data[0]  # (n, h)

    def act(self, image: np.ndarray, proprio: np.ndarray, last_reward: Optional[float] = None) -> np.ndarray:
        if not self._reset_done:
            raise ContractError("agent used before reset")
        m = self.model
        cfg = m.cfg
        h = cfg.hidden_dim
        self._i_cache.append(m.enc.encode_images(np.asarray(image)[None]).data[0])
        self._p_cache.append(
            m.enc.encode_lowdim(np.asarray(proprio, dtype=np.float32)[None], "p").data[0]
        )
        if self._last_action is None:
            self._aprev_cache.append(m.enc.placeholders.a.data.copy())
        else:
            self._aprev_cache.append(m.enc.encode_lowdim(self._last_action[None], "a").data[0])
        if self._target_return is not None:
            if last_reward is not None and self._rtg:
                self._target_return -= float(last_reward)
            self._rtg.append(self._target_return)

        t = len(self._i_cache)
        k_ex = cfg.executor.context_size
        n = min(t, k_ex)
        if self.conditioning == "planner":
            preds = self._planner_predictions(t)
            cond = preds[-n:]
        else:
            cond = np.tile(self._goal_obs_emb, (n, 1))

        i_win = np.stack(self._i_cache[-n:])
        p_win = np.stack(self._p_cache[-n:])
        a_win = np.stack(self._aprev_cache[-n:])
        if cfg.encoder.mask_proprio:
            p_win = np.tile(m.enc.placeholders.p.data, (n, 1))
        grouped = np.stack([i_win, p_win, cond.astype(i_win.dtype), a_win], axis=1).reshape(4 * n, h)
        ts = np.repeat(np.arange(t - n + 1, t + 1), 4)[None]
        out = m.executor.forward(Tensor(grouped[None]), timesteps=ts)
        a_rows = T.tanh(m.action_head(out[:, 2::4]))
        action = a_rows.data[0, -1].astype(np.float32).copy()
        self._last_action = action
        return action


@dataclass
class RolloutResult:
    success: bool
    trajectory: Trajectory


def rollout(
    agent, task: TaskSpec, env_cfg: EnvConfig, seed: int, max_steps: Optional[int] = None
) -> RolloutResult:
    """One seeded closed-loop episode: render -> act -> env_step until done."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(task.task_id.encode())]))
    state = env_reset(task, env_cfg, rng)
    agent.reset(task, rng)
    max_steps = env_cfg.horizon if max_steps is None else min(max_steps, env_cfg.horizon)
    images, proprio, actions, rewards = [], [], [], []
    last_reward: Optional[float] = None
    done = False
    while not done and state.step_count < max_steps:
        if isinstance(agent, ScriptedOracleAgent):
            agent.observe_object(state.object_pos)
        img = render(state, env_cfg)
        images.append(img)
        proprio.append(state.agent_pos.astype(np.float32).copy())
        action = np.clip(np.asarray(agent.act(img, state.agent_pos, last_reward), dtype=np.float32), -1.0, 1.0)
        actions.append(action)
        state, reward, done = env_step(state, action, env_cfg)
        rewards.append(reward)
        last_reward = reward
    returns = np.cumsum(np.asarray(rewards, dtype=np.float32)[::-1])[::-1].copy()
    traj = Trajectory(
        goal_image=task.goal_image.copy(),
        images=np.stack(images),
        proprio=np.stack(proprio),
        actions=np.stack(actions),
        returns=returns,
        task_id=task.task_id,
    )
    return RolloutResult(success=is_success(state, env_cfg), trajectory=traj)


def evaluate(
    make_agent: Callable[[TaskSpec], object],
    tasks: Sequence[TaskSpec],
    n_episodes: int,
    env_cfg: EnvConfig,
    base_seed: int = 0,
    max_steps: Optional[int] = None,
) -> dict[str, float]:
    """Mean success per task over independently seeded episodes."""
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    rates = {}
    for task in tasks:
        agent = make_agent(task)
        wins = 0
        for ei in range(n_episodes):
            result = rollout(agent, task, env_cfg, seed=base_seed * 100003 + ei, max_steps=max_steps)
            wins += int(result.success)
        rates[task.task_id] = wins / n_episodes
    return rates


@dataclass
class EvalReport:
    per_task_rates: list[dict] = field(default_factory=list)  # one dict per evaluated epoch
    success_curve: list[float] = field(default_factory=list)
    best_rate: float = 0.0
    best_epoch: int = 0
    seed: int = 0
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_task_rates": self.per_task_rates,
                "success_curve": self.success_curve,
                "best_rate": self.best_rate,
                "best_epoch": self.best_epoch,
                "seed": self.seed,
                "config_fingerprint": self.config_fingerprint,
                "extra": self.extra,
            },
            sort_keys=True,
            indent=2,
        )


def config_fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def eval_protocol(
    train_epoch: Optional[Callable[[int], None]],
    epochs: int,
    eval_fn: Callable[[], dict[str, float]],
    seed: int = 0,
    fingerprint: str = "",
) -> EvalReport:
    """Evaluate after every training epoch and report the best-epoch rate.

    With ``epochs == 0`` the model is evaluated once as-is (the zero-shot path).
    """
    report = EvalReport(seed=seed, config_fingerprint=fingerprint)
    points = max(1, epochs)
    for epoch in range(points):
        if epochs > 0 and train_epoch is not None:
            train_epoch(epoch)
        rates = eval_fn()
        mean = float(np.mean(list(rates.values())))
        report.per_task_rates.append(rates)
        report.success_curve.append(mean)
    report.best_epoch = int(np.argmax(report.success_curve))
    report.best_rate = float(report.success_curve[report.best_epoch])
    return report

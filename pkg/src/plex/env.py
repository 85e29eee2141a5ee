"""A deterministic 2D reach/push world with rendered image observations.

The agent is a disc moving in the unit square at up to ``speed`` per axis per
step. On push tasks the object is dragged while the agent is within the
contact radius. Reward is -1 per step and 0 on the transition that reaches the
goal; episodes end on success or at the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ContractError

TASK_KINDS = ("reach", "push")


@dataclass
class EnvConfig:
    speed: float = 0.05
    contact_radius: float = 0.08
    success_radius: float = 0.06
    horizon: int = 100
    image_hw: int = 24
    agent_disc: float = 0.07
    object_disc: float = 0.07
    goal_disc: float = 0.09
    # start-state and split geometry (goal regions of the two splits are disjoint)
    agent_start_lo: tuple = (0.15, 0.15)
    agent_start_hi: tuple = (0.85, 0.85)
    object_lo: tuple = (0.30, 0.25)
    object_hi: tuple = (0.60, 0.75)
    train_goal_lo: tuple = (0.10, 0.15)
    train_goal_hi: tuple = (0.55, 0.85)
    target_goal_lo: tuple = (0.68, 0.20)
    target_goal_hi: tuple = (0.90, 0.80)
    min_start_goal_dist: float = 0.3
    # demonstration styles
    humanlike_speed_range: tuple = (0.4, 1.0)
    humanlike_jitter: float = 0.1
    waypoint_tolerance: float = 0.05


@dataclass
class WorldState:
    agent_pos: np.ndarray
    object_pos: np.ndarray
    goal_pos: np.ndarray
    task_kind: str
    step_count: int = 0


@dataclass
class TaskSpec:
    task_id: str
    task_kind: str
    goal_pos: np.ndarray
    object_start: np.ndarray
    goal_image: np.ndarray
    split: str  # "train" | "target"


def _clip01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def is_success(state: WorldState, cfg: EnvConfig) -> bool:
    probe = state.agent_pos if state.task_kind == "reach" else state.object_pos
    return float(np.linalg.norm(probe - state.goal_pos)) < cfg.success_radius


def env_reset(task: TaskSpec, cfg: EnvConfig, rng: np.random.Generator) -> WorldState:
    goal = np.array(task.goal_pos, dtype=np.float64)
    for _ in range(200):
        agent = rng.uniform(cfg.agent_start_lo, cfg.agent_start_hi).astype(np.float64)
        if float(np.linalg.norm(agent - goal)) >= cfg.min_start_goal_dist:
            break
    return WorldState(
        agent_pos=agent,
        object_pos=np.array(task.object_start, dtype=np.float64),
        goal_pos=goal,
        task_kind=task.task_kind,
        step_count=0,
    )


def env_step(state: WorldState, action: np.ndarray, cfg: EnvConfig) -> tuple[WorldState, float, bool]:
    """Apply one action in [-1, 1]^2; returns (state', reward, done)."""
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    new_agent = _clip01(state.agent_pos + cfg.speed * action)
    new_object = state.object_pos
    if state.task_kind == "push":
        # non-penetrating shove: while the agent overlaps the contact disc the
        # object is pushed out along the agent->object line, and is left
        # behind once the agent moves past
        gap = new_object - new_agent
        dist = float(np.linalg.norm(gap))
        if dist < cfg.contact_radius:
            if dist > 1e-9:
                direction = gap / dist
            else:
                delta = new_agent - state.agent_pos
                nd = float(np.linalg.norm(delta))
                direction = delta / nd if nd > 1e-9 else np.array([1.0, 0.0])
            new_object = _clip01(new_agent + direction * cfg.contact_radius)
    new_state = WorldState(
        agent_pos=new_agent,
        object_pos=new_object,
        goal_pos=state.goal_pos,
        task_kind=state.task_kind,
        step_count=state.step_count + 1,
    )
    success = is_success(new_state, cfg)
    reward = 0.0 if success else -1.0
    done = success or new_state.step_count >= cfg.horizon
    return new_state, reward, done


def render(state: WorldState, cfg: EnvConfig) -> np.ndarray:
    """Deterministic raster: agent/object/goal discs on channels 0/1/2."""
    hw = cfg.image_hw
    coords = (np.arange(hw) + 0.5) / hw
    px = coords[None, :]
    py = coords[:, None]
    img = np.zeros((hw, hw, 3), dtype=np.float32)
    for ch, (center, radius) in enumerate(
        [(state.agent_pos, cfg.agent_disc), (state.object_pos, cfg.object_disc), (state.goal_pos, cfg.goal_disc)]
    ):
        inside = (px - center[0]) ** 2 + (py - center[1]) ** 2 < radius**2
        img[:, :, ch][inside] = 1.0
    return img


def goal_state(task: TaskSpec, cfg: EnvConfig) -> WorldState:
    """Canonical terminal state used to render the goal image."""
    goal = np.array(task.goal_pos, dtype=np.float64)
    obj = np.array(task.object_start, dtype=np.float64)
    if task.task_kind == "reach":
        return WorldState(agent_pos=goal.copy(), object_pos=obj, goal_pos=goal, task_kind="reach")
    direction = goal - obj
    norm = float(np.linalg.norm(direction))
    offset = direction / norm * cfg.contact_radius if norm > 1e-9 else np.array([cfg.contact_radius, 0.0])
    return WorldState(agent_pos=_clip01(goal - offset), object_pos=goal.copy(), goal_pos=goal, task_kind="push")


# ---------------------------------------------------------------------------
# demonstration policies
# ---------------------------------------------------------------------------


def _move_toward(pos: np.ndarray, target: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    return np.clip((target - pos) / cfg.speed, -1.0, 1.0)


def _push_phase_target(
    agent: np.ndarray, obj: np.ndarray, goal: np.ndarray, cfg: EnvConfig, pushing: bool
) -> tuple[int, np.ndarray]:
    """(phase, point the agent should head to) for bulldoze pushing.

    Phase 0 swings wide to the far side of the object; phase 1 overlaps the
    contact disc from behind so each step shoves the object toward the goal.
    Engage/release thresholds differ (hysteresis) to avoid limit cycles on
    the phase boundary.
    """
    to_goal = goal - obj
    n = float(np.linalg.norm(to_goal))
    u = to_goal / n if n > 1e-9 else np.array([1.0, 0.0])
    rel = agent - obj
    behindness = float(np.dot(rel, -u))
    threshold = cfg.contact_radius * (0.05 if pushing else 0.5)
    if behindness < threshold:
        # swing around: a waypoint blending "behind" with the agent's side,
        # so reaching it always crosses the push-engagement threshold
        perp = np.array([-u[1], u[0]])
        side = 1.0 if float(np.dot(rel, perp)) >= 0 else -1.0
        detour = (-u + side * perp * 1.2) / float(np.linalg.norm(-u + side * perp * 1.2))
        return 0, _clip01(obj + detour * 0.2)
    return 1, _clip01(obj - u * (cfg.contact_radius * 0.55))


class DemoPolicy:
    """Scripted or humanlike demonstrator.

    ``humanlike`` draws a per-episode speed factor and jittered intermediate
    waypoints, producing the variable-length trajectories characteristic of
    human-collected demonstrations.
    """

    def __init__(self, task: TaskSpec, cfg: EnvConfig, style: str = "scripted", rng: Optional[np.random.Generator] = None):
        if style not in ("scripted", "humanlike"):
            raise ContractError(f"unknown demonstration style {style!r}")
        self.task = task
        self.cfg = cfg
        self.style = style
        if style == "humanlike":
            if rng is None:
                raise ContractError("humanlike style needs an rng")
            lo, hi = cfg.humanlike_speed_range
            self.speed_factor = float(rng.uniform(lo, hi))
            j = cfg.humanlike_jitter
            self._jitter = [rng.uniform(-j, j, size=2), rng.uniform(-j, j, size=2)]
            self._waypoint: list[Optional[np.ndarray]] = [None, None]
            self._passed_waypoint = [False, False]
        else:
            self.speed_factor = 1.0

    def _phase_targets(self, state: WorldState) -> tuple[int, np.ndarray]:
        """(phase index, target point for the agent)."""
        if state.task_kind == "reach":
            return 0, state.goal_pos
        phase, target = _push_phase_target(
            state.agent_pos, state.object_pos, state.goal_pos, self.cfg, getattr(self, "_pushing", False)
        )
        self._pushing = phase == 1
        return phase, target

    def __call__(self, state: WorldState) -> np.ndarray:
        phase, target = self._phase_targets(state)
        if self.style == "humanlike" and not self._passed_waypoint[phase]:
            if self._waypoint[phase] is None:
                # fixed detour per phase, anchored where the phase began
                midpoint = 0.5 * (state.agent_pos + target)
                self._waypoint[phase] = np.clip(midpoint + self._jitter[phase], 0.05, 0.95)
            waypoint = self._waypoint[phase]
            if float(np.linalg.norm(state.agent_pos - waypoint)) < self.cfg.waypoint_tolerance:
                self._passed_waypoint[phase] = True
            else:
                target = waypoint
        action = _move_toward(state.agent_pos, target, self.cfg)
        return np.clip(self.speed_factor * action, -1.0, 1.0)


def scripted_policy(state: WorldState, task: TaskSpec, cfg: EnvConfig, style: str = "scripted", rng=None) -> np.ndarray:
    """Single-call form; humanlike callers should hold a DemoPolicy per episode."""
    return DemoPolicy(task, cfg, style=style, rng=rng)(state)


# ---------------------------------------------------------------------------
# task construction
# ---------------------------------------------------------------------------


def make_tasks(
    cfg: EnvConfig,
    n_train: int = 8,
    n_target: int = 2,
    seed: int = 0,
    kinds: tuple = ("reach", "push"),
) -> tuple[list[TaskSpec], list[TaskSpec]]:
    """Sample train/target task lists with disjoint goal regions."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xEC0]))
    train, target = [], []
    for split, count, lo, hi, out in (
        ("train", n_train, cfg.train_goal_lo, cfg.train_goal_hi, train),
        ("target", n_target, cfg.target_goal_lo, cfg.target_goal_hi, target),
    ):
        for i in range(count):
            kind = kinds[i % len(kinds)]
            goal = rng.uniform(lo, hi)
            obj = rng.uniform(cfg.object_lo, cfg.object_hi)
            task = TaskSpec(
                task_id=f"{split}-{kind}-{i}",
                task_kind=kind,
                goal_pos=goal,
                object_start=obj,
                goal_image=np.zeros(1, dtype=np.float32),
                split=split,
            )
            task.goal_image = render(goal_state(task, cfg), cfg)
            out.append(task)
    return train, target

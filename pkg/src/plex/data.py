"""Dataset generation recipes and the on-disk dataset format.

Three categories, mirroring how such corpora exist in the wild:
  mtvd -- many successful scripted demos on train tasks, video + goal only;
  vmt  -- fewer noisy visuomotor trajectories on target-task environments
          (Gaussian action noise, recorded actions are the altered ones,
          no task spec, not filtered for success);
  ttd  -- a small sample of clean demos per target task, full modalities or
          video-only.

File layout: magic "PLXD", version byte, u32-LE manifest length, JSON
manifest, then per-trajectory raw little-endian float32 arrays in manifest
order. Round-trips are byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .env import DemoPolicy, EnvConfig, TaskSpec, env_reset, env_step, is_success, render
from .errors import ContractError, FormatError, GenerationError
from .trajectory import Trajectory

MAGIC = b"PLXD"
VERSION = 1
DATASET_KINDS = ("mtvd", "vmt", "ttd")
_ARRAY_FIELDS = ("goal_image", "images", "proprio", "actions", "returns")
_FIELD_TO_FLAG = {"goal_image": "g", "images": "I", "proprio": "p", "actions": "a", "returns": "R"}


@dataclass
class Dataset:
    kind: str
    trajectories: list[Trajectory]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ContractError(f"dataset kind must be one of {DATASET_KINDS}")
        for traj in self.trajectories:
            traj.validate()
            if self.kind == "mtvd" and (traj.present["a"] or not traj.present["g"]):
                raise ContractError("mtvd trajectories are video-only with a task spec")
            if self.kind == "vmt" and (not traj.present["a"] or traj.present["g"]):
                raise ContractError("vmt trajectories carry actions and no task spec")


def gaussian_action_noise(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """The exploration noise injected into scripted actions for vmt data."""
    return rng.normal(0.0, std, size=shape)


# ---------------------------------------------------------------------------
# episode rollout
# ---------------------------------------------------------------------------


def rollout_demo(
    task: TaskSpec,
    env_cfg: EnvConfig,
    rng: np.random.Generator,
    style: str = "scripted",
    noise_std: float = 0.0,
) -> tuple[Trajectory, bool]:
    """Run one demonstration episode; returns (trajectory, success)."""
    policy = DemoPolicy(task, env_cfg, style=style, rng=rng)
    state = env_reset(task, env_cfg, rng)
    images, proprio, actions, rewards = [], [], [], []
    done = False
    while not done:
        images.append(render(state, env_cfg))
        proprio.append(state.agent_pos.astype(np.float32).copy())
        action = policy(state)
        if noise_std > 0:
            action = np.clip(action + gaussian_action_noise(rng, action.shape, noise_std), -1.0, 1.0)
        actions.append(np.asarray(action, dtype=np.float32))
        state, reward, done = env_step(state, action, env_cfg)
        rewards.append(reward)
    returns = np.cumsum(np.asarray(rewards, dtype=np.float32)[::-1])[::-1].copy()
    traj = Trajectory(
        goal_image=task.goal_image.copy(),
        images=np.stack(images),
        proprio=np.stack(proprio),
        actions=np.stack(actions),
        returns=returns,
        task_id=task.task_id,
    )
    return traj, is_success(state, env_cfg)


def generate_dataset(
    kind: str,
    tasks: Sequence[TaskSpec],
    n_per_task: int,
    env_cfg: EnvConfig,
    seed: int,
    style: str = "scripted",
    noise_std: float = 0.5,
    video_only: bool = False,
    pool_size: int = 75,
    retry_budget: int = 25,
) -> Dataset:
    """Produce one of the three dataset categories from the matching task split."""
    if kind not in DATASET_KINDS:
        raise ContractError(f"unknown dataset kind {kind!r}")
    want_split = "train" if kind == "mtvd" else "target"
    for task in tasks:
        if task.split != want_split:
            raise ContractError(f"{kind} datasets draw from the {want_split} split, got task {task.task_id!r}")

    trajectories: list[Trajectory] = []
    base = [seed, zlib.crc32(kind.encode())]
    for ti, task in enumerate(tasks):
        if kind == "vmt":
            for ei in range(n_per_task):
                rng = np.random.default_rng(np.random.SeedSequence(base + [ti, ei]))
                traj, _success = rollout_demo(task, env_cfg, rng, style="scripted", noise_std=noise_std)
                traj.meta["noise_std"] = noise_std
                trajectories.append(traj.strip("g"))
            continue
        # success-filtered categories
        count = pool_size if kind == "ttd" else n_per_task
        pool: list[Trajectory] = []
        attempt = 0
        while len(pool) < count:
            if attempt >= count + retry_budget:
                raise GenerationError(f"task {task.task_id!r}: only {len(pool)}/{count} successes in {attempt} episodes")
            rng = np.random.default_rng(np.random.SeedSequence(base + [ti, attempt]))
            traj, success = rollout_demo(task, env_cfg, rng, style=style)
            attempt += 1
            if success:
                pool.append(traj)
        if kind == "mtvd":
            trajectories.extend(t.strip("paR") for t in pool)
        else:  # ttd
            pick = np.random.default_rng(np.random.SeedSequence(base + [ti, 0xF1]))
            chosen = pick.choice(len(pool), size=min(n_per_task, len(pool)), replace=False)
            for idx in sorted(int(i) for i in chosen):
                trajectories.append(pool[idx].strip("paR") if video_only else pool[idx])

    ds = Dataset(
        kind=kind,
        trajectories=trajectories,
        metadata={
            "seed": seed,
            "style": style,
            "noise_std": noise_std if kind == "vmt" else 0.0,
            "video_only": bool(video_only),
            "n_per_task": n_per_task,
            "tasks": [t.task_id for t in tasks],
        },
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path: str) -> None:
    dataset.validate()
    entries = []
    blobs: list[bytes] = []
    for traj in dataset.trajectories:
        shapes = {}
        for fname in _ARRAY_FIELDS:
            arr = getattr(traj, fname)
            if arr is not None:
                arr32 = np.ascontiguousarray(arr, dtype="<f4")
                shapes[fname] = list(arr32.shape)
                blobs.append(arr32.tobytes())
        entries.append(
            {
                "present": {flag: getattr(traj, fname) is not None for fname, flag in _FIELD_TO_FLAG.items()},
                "shapes": shapes,
                "task_id": traj.task_id,
            }
        )
    manifest = {
        "kind": dataset.kind,
        "metadata": dataset.metadata,
        "count": len(dataset.trajectories),
        "trajectories": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        for blob in blobs:
            f.write(blob)


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if raw[4] != VERSION:
        raise FormatError(f"{path}: unsupported version {raw[4]} at offset 4")
    (mlen,) = struct.unpack("<I", raw[5:9])
    if 9 + mlen > len(raw):
        raise FormatError(f"{path}: manifest truncated at offset 9 (need {mlen} bytes)")
    try:
        manifest = json.loads(raw[9 : 9 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: manifest is not valid JSON ({e})") from None
    offset = 9 + mlen
    trajectories = []
    for i, entry in enumerate(manifest.get("trajectories", [])):
        present = entry.get("present", {})
        shapes = entry.get("shapes", {})
        declared = {fname for fname, flag in _FIELD_TO_FLAG.items() if present.get(flag, False)}
        if declared != set(shapes):
            raise FormatError(f"{path}: trajectory {i} modality flags contradict stored arrays")
        kwargs = {}
        for fname in _ARRAY_FIELDS:
            if fname not in shapes:
                continue
            shape = tuple(int(s) for s in shapes[fname])
            nbytes = int(np.prod(shape)) * 4
            if offset + nbytes > len(raw):
                raise FormatError(f"{path}: payload truncated at offset {offset} (trajectory {i}, {fname})")
            kwargs[fname] = np.frombuffer(raw[offset : offset + nbytes], dtype="<f4").reshape(shape).copy()
            offset += nbytes
        trajectories.append(Trajectory(task_id=entry.get("task_id", ""), **kwargs))
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes at offset {offset}")
    ds = Dataset(kind=manifest["kind"], trajectories=trajectories, metadata=manifest.get("metadata", {}))
    ds.validate()
    return ds

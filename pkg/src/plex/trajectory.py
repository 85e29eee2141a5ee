"""Episode container shared by the model, training pipeline and datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, ShapeError

MODALITY_ORDER = ("g", "I", "p", "a", "R")


@dataclass
class Trajectory:
    """One episode: goal spec, per-step images/proprio/actions/returns-to-go.

    A missing modality is stored as ``None``; ``present`` is derived from that,
    so the mask can never disagree with the arrays.
    """

    goal_image: Optional[np.ndarray] = None  # (H, W, C)
    images: Optional[np.ndarray] = None  # (T, H, W, C)
    proprio: Optional[np.ndarray] = None  # (T, p_dim)
    actions: Optional[np.ndarray] = None  # (T, a_dim), entries in [-1, 1]
    returns: Optional[np.ndarray] = None  # (T,) returns-to-go
    task_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def present(self) -> dict[str, bool]:
        return {
            "g": self.goal_image is not None,
            "I": self.images is not None,
            "p": self.proprio is not None,
            "a": self.actions is not None,
            "R": self.returns is not None,
        }

    @property
    def length(self) -> int:
        for arr in (self.images, self.proprio, self.actions, self.returns):
            if arr is not None:
                return int(arr.shape[0])
        raise ContractError("trajectory has no per-step modality")

    def validate(self) -> None:
        t = self.length
        for name, arr in (("images", self.images), ("proprio", self.proprio), ("actions", self.actions), ("returns", self.returns)):
            if arr is not None and arr.shape[0] != t:
                raise ShapeError(f"{name} has length {arr.shape[0]}, expected {t}")
        if self.actions is not None:
            if np.abs(self.actions).max(initial=0.0) > 1.0 + 1e-6:
                raise ContractError("actions must lie in [-1, 1]")

    def strip(self, modalities: str) -> "Trajectory":
        """Copy with the named modalities removed (e.g. 'paR' for video-only)."""
        out = Trajectory(
            goal_image=None if "g" in modalities else self.goal_image,
            images=None if "I" in modalities else self.images,
            proprio=None if "p" in modalities else self.proprio,
            actions=None if "a" in modalities else self.actions,
            returns=None if "R" in modalities else self.returns,
            task_id=self.task_id,
            meta=dict(self.meta),
        )
        return out

"""Modality encoders mapping raw inputs into the shared h-dimensional token space.

Images go through random crop (train) or center crop (eval), a small conv
stack, a spatial softmax, and an MLP; one conv/MLP instance per camera, with a
joint projection to h. Low-dimensional modalities use one linear layer each.
Missing modalities are represented by trainable placeholder vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .nn import Conv2d, Linear, Module, Tensor, normal_param

MODALITIES = ("g", "I", "p", "a", "R")


@dataclass
class EncoderConfig:
    image_hw: int = 24
    image_channels: int = 3
    n_cameras: int = 1
    crop_ratio: float = 0.9
    conv_channels: tuple = (8, 16, 32)
    conv_strides: tuple = (2, 2, 2)
    conv_kernel: int = 3
    mlp_hidden: tuple = (64,)
    proprio_dim: int = 2
    action_dim: int = 2
    return_dim: int = 1
    return_scale: float = 100.0
    mask_proprio: bool = False  # replace proprio tokens with the placeholder during pretraining

    @property
    def crop_hw(self) -> int:
        return int(round(self.image_hw * self.crop_ratio))


def random_crop(image: np.ndarray, out_hw: int, rng: Optional[np.random.Generator] = None, train: bool = False) -> np.ndarray:
    """Crop to out_hw x out_hw: random offset at train time, center crop at eval."""
    h, w = image.shape[0], image.shape[1]
    if out_hw > h or out_hw > w:
        raise ContractError(f"crop extent {out_hw} exceeds input {h}x{w}")
    if train:
        if rng is None:
            raise ContractError("train-time random crop needs an rng")
        oy = int(rng.integers(0, h - out_hw + 1))
        ox = int(rng.integers(0, w - out_hw + 1))
    else:
        oy = (h - out_hw) // 2
        ox = (w - out_hw) // 2
    return image[oy : oy + out_hw, ox : ox + out_hw]


def crop_batch(images: np.ndarray, out_hw: int, rng: Optional[np.random.Generator], train: bool) -> np.ndarray:
    """Per-sample crops for a (N, H, W, C) batch."""
    n = images.shape[0]
    out = np.empty((n, out_hw, out_hw, images.shape[3]), dtype=images.dtype)
    for i in range(n):
        out[i] = random_crop(images[i], out_hw, rng, train)
    return out


def spatial_softmax(featmap: Tensor) -> Tensor:
    """Per-channel softmax over locations, then expected (x, y) in [-1, 1].

    Input (N, C, H, W) or (C, H, W); output (N, 2C) laid out as
    [x_1..x_C, y_1..y_C] (or (2C,) unbatched).
    """
    squeeze = featmap.ndim == 3
    x = featmap if not squeeze else T.reshape(featmap, (1,) + featmap.data.shape)
    n, c, h, w = x.data.shape
    if h < 1 or w < 1:
        raise ShapeError("spatial_softmax needs H, W >= 1")
    probs = T.softmax(T.reshape(x, (n, c, h * w)), axis=-1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    grid_x = np.tile(xs, h).reshape(h * w, 1)
    grid_y = np.repeat(ys, w).reshape(h * w, 1)
    ex = T.reshape(T.matmul(probs, Tensor(grid_x.astype(x.dtype))), (n, c))
    ey = T.reshape(T.matmul(probs, Tensor(grid_y.astype(x.dtype))), (n, c))
    out = T.concat([ex, ey], axis=1)
    return T.reshape(out, (2 * c,)) if squeeze else out


class CameraEncoder(Module):
    """Conv stack -> spatial softmax -> MLP, for one camera."""

    def __init__(self, cfg: EncoderConfig, hidden_dim: int, rng: np.random.Generator, dtype=np.float32):
        pad = cfg.conv_kernel // 2
        self.convs = []
        c_in = cfg.image_channels
        for c_out, stride in zip(cfg.conv_channels, cfg.conv_strides):
            self.convs.append(Conv2d(c_in, c_out, cfg.conv_kernel, stride, pad, rng, dtype=dtype))
            c_in = c_out
        self.mlp = []
        d = 2 * cfg.conv_channels[-1]
        for width in cfg.mlp_hidden:
            self.mlp.append(Linear(d, width, rng, dtype=dtype))
            d = width
        self.out = Linear(d, hidden_dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = T.relu(conv(x))
        x = spatial_softmax(x)
        for lin in self.mlp:
            x = T.relu(lin(x))
        return self.out(x)


class ImageEncoder(Module):
    """Per-camera encoders with a joint projection to the token space."""

    def __init__(self, cfg: EncoderConfig, hidden_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.cameras = [CameraEncoder(cfg, hidden_dim, rng, dtype=dtype) for _ in range(cfg.n_cameras)]
        self.joint = Linear(cfg.n_cameras * hidden_dim, hidden_dim, rng, dtype=dtype)
        self.cfg = cfg
        self.dtype = dtype

    def __call__(self, images: Sequence[np.ndarray], train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """images: one (N, H, W, C) array per camera, raw extent, values in [0, 1]."""
        if len(images) != len(self.cameras):
            raise ShapeError(f"expected {len(self.cameras)} camera streams, got {len(images)}")
        feats = []
        for cam, arr in zip(self.cameras, images):
            arr = np.asarray(arr)
            if arr.shape[1:] != (self.cfg.image_hw, self.cfg.image_hw, self.cfg.image_channels):
                raise ShapeError(
                    f"camera input {arr.shape[1:]} != "
                    f"({self.cfg.image_hw}, {self.cfg.image_hw}, {self.cfg.image_channels})"
                )
            cropped = crop_batch(arr, self.cfg.crop_hw, rng, train)
            x = Tensor(cropped.transpose(0, 3, 1, 2).astype(self.dtype))
            feats.append(cam(x))
        return self.joint(feats[0] if len(feats) == 1 else T.concat(feats, axis=1))


class PlaceholderBank(Module):
    """One trainable h-vector per modality, substituted when data is missing."""

    def __init__(self, hidden_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.g = normal_param(rng, (hidden_dim,), dtype=dtype)
        self.I = normal_param(rng, (hidden_dim,), dtype=dtype)
        self.p = normal_param(rng, (hidden_dim,), dtype=dtype)
        self.a = normal_param(rng, (hidden_dim,), dtype=dtype)
        self.R = normal_param(rng, (hidden_dim,), dtype=dtype)

    def placeholder_for(self, modality: str) -> Tensor:
        if modality not in MODALITIES:
            raise ContractError(f"unknown modality {modality!r}, expected one of {MODALITIES}")
        return getattr(self, modality)


class ObservationEncoders(Module):
    """The full encoder bank: image, task, low-dim heads, and placeholders."""

    def __init__(self, cfg: EncoderConfig, hidden_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.image = ImageEncoder(cfg, hidden_dim, rng, dtype=dtype)
        self.task_proj = Linear(hidden_dim, hidden_dim, rng, dtype=dtype)
        self.proprio = Linear(cfg.proprio_dim, hidden_dim, rng, dtype=dtype)
        self.action = Linear(cfg.action_dim, hidden_dim, rng, dtype=dtype)
        self.reward = Linear(cfg.return_dim, hidden_dim, rng, dtype=dtype)
        self.placeholders = PlaceholderBank(hidden_dim, rng, dtype=dtype)
        self.cfg = cfg
        self.hidden_dim = hidden_dim
        self.dtype = dtype

    # -- image paths ----------------------------------------------------
    def encode_images(self, images: np.ndarray, train: bool = False, rng=None) -> Tensor:
        """(N, H, W, C) single-camera batch -> (N, h) observation embeddings."""
        return self.image([images], train=train, rng=rng)

    def encode_task(self, goal_images: np.ndarray, train: bool = False, rng=None) -> Tensor:
        """Goal images share the observation encoder, then a task projection."""
        return self.task_proj(self.encode_images(goal_images, train=train, rng=rng))

    # -- low-dim paths ----------------------------------------------------
    def encode_lowdim(self, x: np.ndarray, modality: str) -> Tensor:
        head = {"p": self.proprio, "a": self.action, "R": self.reward}.get(modality)
        if head is None:
            raise ContractError(f"encode_lowdim expects modality in (p, a, R), got {modality!r}")
        arr = np.asarray(x, dtype=self.dtype)
        expected = {"p": self.cfg.proprio_dim, "a": self.cfg.action_dim, "R": self.cfg.return_dim}[modality]
        if arr.shape[-1] != expected:
            raise ShapeError(f"modality {modality!r} expects dim {expected}, got {arr.shape[-1]}")
        if modality == "R":
            arr = arr / self.cfg.return_scale
        return head(Tensor(arr))

    def placeholder_for(self, modality: str) -> Tensor:
        return self.placeholders.placeholder_for(modality)

    # -- parameter groups -------------------------------------------------
    def image_param_names(self, prefix: str = "enc.") -> list[str]:
        return [prefix + n for n, _ in self.image.named_parameters("image.")]

    def task_param_names(self, prefix: str = "enc.") -> list[str]:
        return [prefix + n for n, _ in self.task_proj.named_parameters("task_proj.")]

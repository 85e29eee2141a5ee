"""Parameter containers and small layers shared by the model components."""

from __future__ import annotations

from typing import Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Module:
    """Base class: any ``Tensor`` attribute with requires_grad is a parameter.

    Traversal follows attribute insertion order, which makes parameter naming
    deterministic for checkpoints, optimizers and freeze scopes.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(f"param {name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


def normal_param(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    """Affine map, GPT-2 style init: W ~ N(0, 0.02), b = 0."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float32):
        self.W = normal_param(rng, (d_in, d_out), std=std, dtype=dtype)
        self.b = zeros_param((d_out,), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.W), self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = zeros_param((dim,), dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    """Square-kernel convolution with He initialization (ReLU stacks)."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        stride: int,
        padding: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        std = float(np.sqrt(2.0 / (c_in * kernel * kernel)))
        self.W = Tensor(rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)).astype(dtype), requires_grad=True)
        self.b = zeros_param((c_out,), dtype=dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.W, self.b, stride=self.stride, padding=self.padding)


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when eval or p == 0."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ShapeError("dropout in train mode needs an rng")
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return T.mul(x, Tensor(mask))


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))

"""GPT-style causal transformer with three positional-encoding modes.

``absolute`` adds a fixed sinusoidal vector per context-local position,
``global`` adds a learned vector per absolute trajectory timestep (bounded by
``t_max``), and ``relative`` conditions the attention scores on token-pair
distances with a learned distance table plus per-head content/position biases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, PositionRangeError, ShapeError
from .nn import LayerNorm, Linear, Module, Tensor, dropout, normal_param
from .tensor import apply_op

POS_MODES = ("absolute", "global", "relative")


@dataclass
class TransformerConfig:
    """Shape and encoding parameters shared by planner and executor stacks.

    ``context_size`` counts trajectory time steps; the owning model converts
    it to a token budget after modality interleaving.
    """

    n_layers: int
    n_heads: int
    hidden_dim: int
    context_size: int
    pos_mode: str = "relative"
    t_max: int = 0
    dropout: float = 0.1

    def validate(self) -> None:
        if self.hidden_dim % self.n_heads != 0:
            raise ContractError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.context_size < 1:
            raise ContractError("context_size must be >= 1")
        if self.pos_mode not in POS_MODES:
            raise ContractError(f"pos_mode must be one of {POS_MODES}, got {self.pos_mode!r}")
        if self.pos_mode == "global" and self.t_max < 1:
            raise ContractError("global mode requires t_max >= 1")


def absolute_positional_encoding(n_positions: int, hidden_dim: int) -> np.ndarray:
    """Fixed sinusoidal table; row i, dims (2j, 2j+1) = sin/cos(i / 10000^(2j/h))."""
    if hidden_dim % 2 != 0:
        raise ContractError("sinusoidal encoding needs an even hidden_dim")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    j = np.arange(hidden_dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * j / hidden_dim)
    table = np.zeros((n_positions, hidden_dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


class GlobalPositionTable(Module):
    """One learned vector per absolute timestep in [0, t_max)."""

    def __init__(self, t_max: int, hidden_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.table = normal_param(rng, (t_max, hidden_dim), dtype=dtype)
        self.t_max = t_max

    def __call__(self, t_abs: int) -> Tensor:
        if not 0 <= t_abs < self.t_max:
            raise PositionRangeError(f"absolute timestep {t_abs} outside [0, {self.t_max})")
        return T.take_rows(self.table, np.asarray([t_abs]))[0]

    def lookup(self, timesteps: np.ndarray, valid: np.ndarray) -> Tensor:
        """Batched rows for (B, T) int timesteps; padding positions read row 0."""
        ts = np.asarray(timesteps)
        real = ts[np.asarray(valid, dtype=bool)]
        if real.size and (real.min() < 0 or real.max() >= self.t_max):
            raise PositionRangeError(
                f"timesteps span [{real.min()}, {real.max()}], table holds [0, {self.t_max})"
            )
        safe = np.where(np.asarray(valid, dtype=bool), ts, 0)
        return T.take_rows(self.table, safe)


class RelativeAttentionParams(Module):
    """Learned distance table plus per-head content (u) and position (v) biases."""

    def __init__(self, max_distance: int, hidden_dim: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        self.rel_embeddings = normal_param(rng, (max_distance, hidden_dim), dtype=dtype)
        self.content_bias = normal_param(rng, (n_heads, hidden_dim // n_heads), dtype=dtype)
        self.position_bias = normal_param(rng, (n_heads, hidden_dim // n_heads), dtype=dtype)
        self.max_distance = max_distance
        self.n_heads = n_heads


_SHIFT_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}


def _shift_indices(t: int, d: int):
    key = (t, d)
    cached = _SHIFT_CACHE.get(key)
    if cached is None:
        i = np.arange(t)[:, None]
        j = np.arange(t)[None, :]
        fwd = np.clip(i - j, 0, d - 1)  # (T,T): distance index per (query, key)
        fwd_valid = (i >= j).astype(np.float64)
        dd = np.arange(d)[None, :]
        inv = np.clip(i - dd, 0, t - 1)  # (T,D): key position per (query, distance)
        inv_valid = ((i - dd >= 0) & (dd < t)).astype(np.float64)
        cached = (fwd, fwd_valid, inv, inv_valid)
        _SHIFT_CACHE[key] = cached
    return cached


def distance_to_pairwise(x: Tensor, t: int) -> Tensor:
    """Map per-distance scores (..., T, D) to pairwise scores (..., T, T).

    out[..., i, j] = x[..., i, i - j] for j <= i; junk above the diagonal
    (callers mask it). The vjp only propagates the causal region, which makes
    it an exact inverse gather rather than a scatter.
    """
    d = x.data.shape[-1]
    fwd, fwd_valid, inv, inv_valid = _shift_indices(t, d)
    lead = x.data.shape[:-2]
    fwd_b = np.broadcast_to(fwd, lead + fwd.shape)
    out = np.take_along_axis(x.data, fwd_b, axis=-1)

    def vjp(g):
        g2 = g * fwd_valid
        inv_b = np.broadcast_to(inv, lead + inv.shape)
        return np.take_along_axis(g2, inv_b, axis=-1) * inv_valid

    return apply_op(out, (x, vjp))


def relative_attention_scores(q: Tensor, k: Tensor, rel: RelativeAttentionParams) -> Tensor:
    """Four-term relative scores, scaled by 1/sqrt(head_dim), causal region only.

    q, k: (..., H, T, dh). score(i,j) = q_i.k_j + q_i.r_{i-j} + u.k_j + v.r_{i-j}.
    Entries above the diagonal are meaningless and must be masked by the caller.
    """
    heads, t, dh = q.data.shape[-3], q.data.shape[-2], q.data.shape[-1]
    scale = 1.0 / np.sqrt(dh)

    qk = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))

    r3 = T.transpose(T.reshape(rel.rel_embeddings, (rel.max_distance, heads, dh)), (1, 2, 0))  # (H,dh,D)
    qr = distance_to_pairwise(T.matmul(q, r3), t)

    u3 = T.reshape(rel.content_bias, (heads, dh, 1))
    uk = T.transpose(T.matmul(k, u3), tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))  # (...,H,1,T)

    vr_d = T.sum_(T.mul(T.reshape(rel.rel_embeddings, (rel.max_distance, heads, dh)), rel.position_bias), axis=-1)
    vr_d = T.transpose(vr_d, (1, 0))  # (H, D)
    vr = distance_to_pairwise(T.broadcast_to(T.reshape(vr_d, (heads, 1, rel.max_distance)), (heads, t, rel.max_distance)), t)

    return T.mul(T.add(T.add(qk, qr), T.add(uk, vr)), scale)


class CausalSelfAttention(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        h = cfg.hidden_dim
        self.qkv = Linear(h, 3 * h, rng, dtype=dtype)
        self.proj = Linear(h, h, rng, dtype=dtype)
        self.rel: Optional[RelativeAttentionParams] = None  # set by owner in relative mode
        self.n_heads = cfg.n_heads
        self.p_drop = cfg.dropout

    def __call__(self, x: Tensor, allowed: np.ndarray, train: bool, rng) -> Tensor:
        b, t, h = x.data.shape
        dh = h // self.n_heads
        qkv = self.qkv(x)
        q = T.transpose(T.reshape(qkv[:, :, 0:h], (b, t, self.n_heads, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(qkv[:, :, h : 2 * h], (b, t, self.n_heads, dh)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(qkv[:, :, 2 * h : 3 * h], (b, t, self.n_heads, dh)), (0, 2, 1, 3))

        if self.rel is not None:
            scores = relative_attention_scores(q, k, self.rel)
        else:
            kt = T.transpose(k, (0, 1, 3, 2))
            scores = T.mul(T.matmul(q, kt), 1.0 / np.sqrt(dh))

        scores = T.masked_fill(scores, allowed[:, None, :, :], -1e9)
        probs = T.softmax(scores, axis=-1)
        probs = dropout(probs, self.p_drop, train, rng)
        out = T.matmul(probs, v)  # (B,H,T,dh)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, h))
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm residual attention + residual MLP (GELU), GPT-2 layout."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        h = cfg.hidden_dim
        self.ln1 = LayerNorm(h, dtype=dtype)
        self.attn = CausalSelfAttention(cfg, rng, dtype=dtype)
        self.ln2 = LayerNorm(h, dtype=dtype)
        self.fc = Linear(h, 4 * h, rng, dtype=dtype)
        self.fc_proj = Linear(4 * h, h, rng, dtype=dtype)
        self.p_drop = cfg.dropout

    def __call__(self, x: Tensor, allowed: np.ndarray, train: bool, rng) -> Tensor:
        a = self.attn(self.ln1(x), allowed, train, rng)
        x = T.add(x, dropout(a, self.p_drop, train, rng))
        m = self.fc_proj(T.gelu(self.fc(self.ln2(x))))
        return T.add(x, dropout(m, self.p_drop, train, rng))


class CausalTransformer(Module):
    """Stack of causal blocks with positional information injected per mode.

    All positional parameters (global table, relative tables/biases) are drawn
    from ``rng_pos`` so that models differing only in ``pos_mode`` share
    identical base weights for a given base stream.
    """

    def __init__(
        self,
        cfg: TransformerConfig,
        max_tokens: int,
        rng_base: np.random.Generator,
        rng_pos: np.random.Generator,
        dtype=np.float32,
    ):
        cfg.validate()
        self.blocks = [TransformerBlock(cfg, rng_base, dtype=dtype) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.hidden_dim, dtype=dtype)
        self.global_table: Optional[GlobalPositionTable] = None
        if cfg.pos_mode == "global":
            self.global_table = GlobalPositionTable(cfg.t_max, cfg.hidden_dim, rng_pos, dtype=dtype)
        elif cfg.pos_mode == "relative":
            for blk in self.blocks:
                blk.attn.rel = RelativeAttentionParams(max_tokens, cfg.hidden_dim, cfg.n_heads, rng_pos, dtype=dtype)
        self._abs_table = absolute_positional_encoding(max_tokens, cfg.hidden_dim).astype(dtype)
        self.cfg = cfg
        self.max_tokens = max_tokens

    def forward(
        self,
        tokens: Tensor,
        timesteps: Optional[np.ndarray] = None,
        valid: Optional[np.ndarray] = None,
        train: bool = False,
        rng=None,
    ) -> Tensor:
        b, t, h = tokens.data.shape
        if t > self.max_tokens:
            raise ShapeError(f"{t} tokens exceed context budget {self.max_tokens}")
        if valid is None:
            valid = np.ones((b, t), dtype=bool)
        valid = np.asarray(valid, dtype=bool)

        x = tokens
        if self.cfg.pos_mode == "absolute":
            pos_ids = np.clip(np.cumsum(valid, axis=1) - 1, 0, None)
            x = T.add(x, Tensor(self._abs_table[pos_ids]))
        elif self.cfg.pos_mode == "global":
            if timesteps is None:
                raise ContractError("global positional mode requires abs timesteps")
            x = T.add(x, self.global_table.lookup(timesteps, valid))
        x = dropout(x, self.cfg.dropout, train, rng)

        causal = np.tril(np.ones((t, t), dtype=bool))
        allowed = causal[None, :, :] & valid[:, None, :]
        eye = np.eye(t, dtype=bool)
        allowed = allowed | eye[None, :, :]  # padding rows still attend self

        for blk in self.blocks:
            x = blk(x, allowed, train, rng)
        return self.ln_f(x)

    __call__ = forward


def transformer_param_count(cfg: TransformerConfig, max_tokens: int) -> int:
    """Analytic parameter count; must match the constructed stack exactly."""
    h = cfg.hidden_dim
    block = 2 * h + (h * 3 * h + 3 * h) + (h * h + h) + 2 * h + (h * 4 * h + 4 * h) + (4 * h * h + h)
    total = cfg.n_layers * block + 2 * h
    if cfg.pos_mode == "global":
        total += cfg.t_max * h
    elif cfg.pos_mode == "relative":
        total += cfg.n_layers * (max_tokens * h + 2 * h)
    return total

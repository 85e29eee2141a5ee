"""The planner-executor composition: context assembly, modality routing,
the two training losses with exact stop-gradient placement, and closed-loop
action selection.

Routing rules (asserted structurally on every assembled context):
  planner tokens:  [task] then per step ([return] if enabled, [image])
  executor tokens: per step [image, proprio, predicted-future, prev-action]
The planner's prediction for step t is read at that step's image token; the
executor's action for step t is read at the predicted-future token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, ObservationEncoders
from .errors import ContractError, ShapeError
from .nn import Linear, Module, Tensor
from .tensor import stop_gradient
from .trajectory import Trajectory
from .transformer import CausalTransformer, TransformerConfig

EXECUTOR_TOKENS_PER_STEP = 4


@dataclass
class PlexConfig:
    hidden_dim: int = 64
    planner: TransformerConfig = field(
        default_factory=lambda: TransformerConfig(2, 2, 64, context_size=10, pos_mode="relative", t_max=128)
    )
    executor: TransformerConfig = field(
        default_factory=lambda: TransformerConfig(2, 2, 64, context_size=4, pos_mode="relative", t_max=128)
    )
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lookahead: int = 1
    use_returns: bool = False

    @property
    def planner_tokens_per_step(self) -> int:
        return 2 if self.use_returns else 1

    def planner_max_tokens(self) -> int:
        return 1 + self.planner.context_size * self.planner_tokens_per_step

    def executor_max_tokens(self) -> int:
        return self.executor.context_size * EXECUTOR_TOKENS_PER_STEP

    def validate(self) -> None:
        if self.lookahead < 1:
            raise ContractError("lookahead must be >= 1")
        if self.executor.context_size > self.planner.context_size:
            raise ContractError("executor context may not exceed the planner context")
        if self.planner.hidden_dim != self.hidden_dim or self.executor.hidden_dim != self.hidden_dim:
            raise ContractError("planner/executor hidden_dim must match the model hidden_dim")
        self.planner.validate()
        self.executor.validate()


@dataclass
class ContextWindow:
    """Fixed-size, left-padded slice of one trajectory.

    Slot i covers absolute step ``timesteps[i]`` when ``valid[i]``;
    ``images_ext`` carries ``steps + lookahead`` frames so row ``i + lookahead``
    is the prediction target for slot i (clamped to the final frame at the
    trajectory end).
    """

    kind: str  # "planner" | "executor"
    steps: int
    lookahead: int
    t_end: int
    valid: np.ndarray  # (K,)
    timesteps: np.ndarray  # (K,) absolute 1-based steps, 0 at padding
    images_ext: np.ndarray  # (K + L, H, W, C)
    goal_image: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None  # (K, 1)
    use_returns: bool = False
    proprio: Optional[np.ndarray] = None  # (K, p_dim)
    prev_actions: Optional[np.ndarray] = None  # (K, a_dim), row for step t holds a_{t-1}
    prev_action_is_placeholder: Optional[np.ndarray] = None  # (K,)
    actions: Optional[np.ndarray] = None  # (K, a_dim) loss targets
    loss_valid: Optional[np.ndarray] = None  # (K,)
    i_hat_targets: Optional[np.ndarray] = None  # (K, h) deployment conditioning
    present: dict = field(default_factory=dict)

    def token_layout(self) -> list[tuple[str, int, bool]]:
        out: list[tuple[str, int, bool]] = []
        if self.kind == "planner":
            out.append(("g", 0, True))
            for i in range(self.steps):
                if self.use_returns:
                    out.append(("R", int(self.timesteps[i]), bool(self.valid[i])))
                out.append(("I", int(self.timesteps[i]), bool(self.valid[i])))
        else:
            for i in range(self.steps):
                t, v = int(self.timesteps[i]), bool(self.valid[i])
                out.extend([("I", t, v), ("p", t, v), ("Ihat", t, v), ("a_prev", t, v)])
        return out

    def validate_routing(self) -> None:
        tags = {m for m, _, _ in self.token_layout()}
        if self.kind == "planner":
            if tags & {"p", "a_prev", "Ihat"}:
                raise ContractError("planner context must not contain proprio/action tokens")
        elif self.kind == "executor":
            if tags & {"g", "R"}:
                raise ContractError("executor context must not contain task/return tokens")
            if self.goal_image is not None or self.returns is not None:
                raise ContractError("executor context must not carry goal or return data")
        else:
            raise ContractError(f"unknown context kind {self.kind!r}")


# ---------------------------------------------------------------------------
# context assembly
# ---------------------------------------------------------------------------


def _window_frames(traj: Trajectory, s: int, pad: int, rows: int) -> np.ndarray:
    big_t = traj.length
    h, w, c = traj.images.shape[1:]
    out = np.zeros((rows, h, w, c), dtype=traj.images.dtype)
    for i in range(pad, rows):
        step = min(s + i - pad, big_t)
        out[i] = traj.images[step - 1]
    return out


def assemble_planner_context(traj: Trajectory, t_end: int, use_returns: bool, steps: int, lookahead: int) -> ContextWindow:
    if not (traj.present["g"] and traj.present["I"]):
        raise ContractError("planner context requires goal and image modalities")
    big_t = traj.length
    if not 1 <= t_end <= big_t:
        raise ContractError(f"t_end {t_end} outside [1, {big_t}]")
    s = max(1, t_end - steps + 1)
    n = t_end - s + 1
    pad = steps - n
    valid = np.zeros(steps, dtype=bool)
    valid[pad:] = True
    timesteps = np.zeros(steps, dtype=np.int64)
    timesteps[pad:] = np.arange(s, t_end + 1)
    returns = None
    if traj.present["R"]:
        returns = np.zeros((steps, 1), dtype=np.float32)
        returns[pad:, 0] = traj.returns[s - 1 : t_end]
    win = ContextWindow(
        kind="planner",
        steps=steps,
        lookahead=lookahead,
        t_end=t_end,
        valid=valid,
        timesteps=timesteps,
        images_ext=_window_frames(traj, s, pad, steps + lookahead),
        goal_image=traj.goal_image,
        returns=returns,
        use_returns=use_returns,
        present=dict(traj.present),
    )
    win.validate_routing()
    return win


def assemble_executor_context(
    traj: Trajectory,
    i_hat_targets: Optional[np.ndarray],
    t_end: int,
    steps: int,
    lookahead: int,
) -> ContextWindow:
    if not (traj.present["I"] and traj.present["p"] and traj.present["a"]):
        raise ContractError("executor context requires image, proprio and action modalities")
    big_t = traj.length
    if not 1 <= t_end <= big_t:
        raise ContractError(f"t_end {t_end} outside [1, {big_t}]")
    s = max(1, t_end - steps + 1)
    n = t_end - s + 1
    pad = steps - n
    valid = np.zeros(steps, dtype=bool)
    valid[pad:] = True
    timesteps = np.zeros(steps, dtype=np.int64)
    timesteps[pad:] = np.arange(s, t_end + 1)

    a_dim = traj.actions.shape[1]
    prev_actions = np.zeros((steps, a_dim), dtype=np.float32)
    prev_ph = np.zeros(steps, dtype=bool)
    actions = np.zeros((steps, a_dim), dtype=np.float32)
    proprio = np.zeros((steps, traj.proprio.shape[1]), dtype=np.float32)
    for i in range(pad, steps):
        step = s + i - pad
        actions[i] = traj.actions[step - 1]
        proprio[i] = traj.proprio[step - 1]
        if step == 1:
            prev_ph[i] = True
        else:
            prev_actions[i] = traj.actions[step - 2]
    loss_valid = valid & (timesteps >= 1) & (timesteps <= big_t - 1)
    if i_hat_targets is not None:
        i_hat_targets = np.asarray(i_hat_targets)
        if i_hat_targets.shape[0] != steps:
            raise ShapeError(f"i_hat_targets must align to {steps} window slots")
    win = ContextWindow(
        kind="executor",
        steps=steps,
        lookahead=lookahead,
        t_end=t_end,
        valid=valid,
        timesteps=timesteps,
        images_ext=_window_frames(traj, s, pad, steps + lookahead),
        proprio=proprio,
        prev_actions=prev_actions,
        prev_action_is_placeholder=prev_ph,
        actions=actions,
        loss_valid=loss_valid,
        i_hat_targets=i_hat_targets,
        present=dict(traj.present),
    )
    win.validate_routing()
    return win


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class PlexModel(Module):
    """Encoders, planner and executor transformers, and the action head."""

    def __init__(self, cfg: PlexConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        ss = np.random.SeedSequence(seed)
        r_enc, r_pl, r_pl_pos, r_ex, r_ex_pos, r_heads = [np.random.default_rng(s) for s in ss.spawn(6)]
        self.enc = ObservationEncoders(cfg.encoder, cfg.hidden_dim, r_enc, dtype=dtype)
        self.planner = CausalTransformer(cfg.planner, cfg.planner_max_tokens(), r_pl, r_pl_pos, dtype=dtype)
        self.planner_head = Linear(cfg.hidden_dim, cfg.hidden_dim, r_heads, dtype=dtype)
        self.executor = CausalTransformer(cfg.executor, cfg.executor_max_tokens(), r_ex, r_ex_pos, dtype=dtype)
        self.action_head = Linear(cfg.hidden_dim, cfg.encoder.action_dim, r_heads, dtype=dtype)
        self.cfg = cfg
        self.dtype = dtype

    # -- parameter scopes ------------------------------------------------
    def encoder_param_names(self) -> list[str]:
        return [f"enc.{n}" for n, _ in self.enc.named_parameters()]

    def image_and_task_param_names(self) -> list[str]:
        return self.enc.image_param_names() + self.enc.task_param_names()

    def planner_last_block_names(self) -> list[str]:
        i = len(self.planner.blocks) - 1
        return [f"planner.blocks.{i}.{n}" for n, _ in self.planner.blocks[i].named_parameters()]

    def executor_last_block_names(self) -> list[str]:
        i = len(self.executor.blocks) - 1
        return [f"executor.blocks.{i}.{n}" for n, _ in self.executor.blocks[i].named_parameters()]

    def action_head_names(self) -> list[str]:
        return [f"action_head.{n}" for n, _ in self.action_head.named_parameters()]

    # -- context assembly with model sizes --------------------------------
    def planner_context(self, traj: Trajectory, t_end: Optional[int] = None) -> ContextWindow:
        t_end = traj.length if t_end is None else t_end
        return assemble_planner_context(traj, t_end, self.cfg.use_returns, self.cfg.planner.context_size, self.cfg.lookahead)

    def executor_context(self, traj: Trajectory, i_hat_targets=None, t_end: Optional[int] = None) -> ContextWindow:
        t_end = traj.length if t_end is None else t_end
        return assemble_executor_context(traj, i_hat_targets, t_end, self.cfg.executor.context_size, self.cfg.lookahead)

    # -- batched internals -------------------------------------------------
    def _encode_planner_inputs(self, windows: Sequence[ContextWindow], train: bool, rng):
        b = len(windows)
        k = self.cfg.planner.context_size
        ext = np.stack([w.images_ext for w in windows])  # (B, K+L, H, W, C)
        goals = np.stack([w.goal_image for w in windows])
        flat = np.concatenate([goals, ext.reshape((-1,) + ext.shape[2:])])
        embs = self.enc.encode_images(flat, train=train, rng=rng)
        g_emb = self.enc.task_proj(embs[:b])
        ext_emb = T.reshape(embs[b:], (b, k + self.cfg.lookahead, self.cfg.hidden_dim))
        return g_emb, ext_emb[:, :k], ext_emb[:, self.cfg.lookahead :]

    def _planner_tokens(self, windows, g_emb, i_in, train: bool, rng):
        b = len(windows)
        k = self.cfg.planner.context_size
        tps = self.cfg.planner_tokens_per_step
        valid = np.stack([w.valid for w in windows])
        timesteps = np.stack([w.timesteps for w in windows])
        if self.cfg.use_returns:
            rets = np.stack([w.returns if w.returns is not None else np.zeros((k, 1), np.float32) for w in windows])
            r_present = np.array([[w.present.get("R", False)] for w in windows], dtype=self.dtype)[:, :, None]
            r_emb = T.reshape(self.enc.encode_lowdim(rets.reshape(b * k, 1), "R"), (b, k, self.cfg.hidden_dim))
            ph = T.reshape(self.enc.placeholder_for("R"), (1, 1, self.cfg.hidden_dim))
            r_tok = T.add(T.mul(r_emb, Tensor(r_present)), T.mul(T.broadcast_to(ph, r_emb.data.shape), Tensor(1.0 - r_present)))
            grouped = T.reshape(T.stack([r_tok, i_in], axis=2), (b, 2 * k, self.cfg.hidden_dim))
        else:
            grouped = i_in
        tokens = T.concat([T.reshape(g_emb, (b, 1, self.cfg.hidden_dim)), grouped], axis=1)
        tok_valid = np.concatenate([np.ones((b, 1), bool), np.repeat(valid, tps, axis=1)], axis=1)
        tok_ts = np.concatenate([np.zeros((b, 1), np.int64), np.repeat(timesteps, tps, axis=1)], axis=1)
        out = self.planner.forward(tokens, timesteps=tok_ts, valid=tok_valid, train=train, rng=rng)
        preds = self.planner_head(out[:, tps::tps])  # read at image-token positions
        return preds

    def planner_forward_batch(self, windows: Sequence[ContextWindow], train: bool = False, rng=None, detach_inputs: bool = False):
        """Returns (i_hat, i_targets, valid). ``detach_inputs`` severs encoder grads."""
        g_emb, i_in, i_tgt = self._encode_planner_inputs(windows, train, rng)
        if detach_inputs:
            g_emb, i_in, i_tgt = stop_gradient(g_emb), stop_gradient(i_in), stop_gradient(i_tgt)
        i_hat = self._planner_tokens(windows, g_emb, i_in, train, rng)
        valid = np.stack([w.valid for w in windows])
        return i_hat, i_tgt, valid

    def executor_forward_batch(
        self,
        windows: Sequence[ContextWindow],
        i_hat_cond: Optional[Tensor] = None,
        train: bool = False,
        rng=None,
    ):
        """Returns (a_hat, loss_valid). Teacher-forces ground-truth future
        embeddings when ``i_hat_cond`` is None and no per-window targets exist."""
        b = len(windows)
        k = self.cfg.executor.context_size
        h = self.cfg.hidden_dim
        ext = np.stack([w.images_ext for w in windows])
        if i_hat_cond is None and windows[0].i_hat_targets is not None:
            i_hat_cond = Tensor(np.stack([w.i_hat_targets for w in windows]).astype(self.dtype))
        teacher = i_hat_cond is None
        frames = ext if teacher else ext[:, :k]
        flat_emb = self.enc.encode_images(frames.reshape((-1,) + frames.shape[2:]), train=train, rng=rng)
        ext_emb = T.reshape(flat_emb, (b, frames.shape[1], h))
        i_in = ext_emb[:, :k]
        if teacher:
            i_hat_cond = ext_emb[:, self.cfg.lookahead :]

        prop = np.stack([w.proprio for w in windows])
        if self.cfg.encoder.mask_proprio:
            p_tok = T.broadcast_to(T.reshape(self.enc.placeholder_for("p"), (1, 1, h)), (b, k, h))
        else:
            p_tok = T.reshape(self.enc.encode_lowdim(prop.reshape(b * k, -1), "p"), (b, k, h))

        prev = np.stack([w.prev_actions for w in windows])
        prev_ph = np.stack([w.prev_action_is_placeholder for w in windows]).astype(self.dtype)[:, :, None]
        a_emb = T.reshape(self.enc.encode_lowdim(prev.reshape(b * k, -1), "a"), (b, k, h))
        ph = T.broadcast_to(T.reshape(self.enc.placeholder_for("a"), (1, 1, h)), (b, k, h))
        a_tok = T.add(T.mul(a_emb, Tensor(1.0 - prev_ph)), T.mul(ph, Tensor(prev_ph)))

        grouped = T.reshape(T.stack([i_in, p_tok, i_hat_cond, a_tok], axis=2), (b, 4 * k, h))
        valid = np.stack([w.valid for w in windows])
        timesteps = np.stack([w.timesteps for w in windows])
        tok_valid = np.repeat(valid, 4, axis=1)
        tok_ts = np.repeat(timesteps, 4, axis=1)
        out = self.executor.forward(grouped, timesteps=tok_ts, valid=tok_valid, train=train, rng=rng)
        a_hat = T.tanh(self.action_head(out[:, 2::4]))  # read at the predicted-future token
        loss_valid = np.stack([w.loss_valid for w in windows])
        return a_hat, loss_valid

    # -- losses -------------------------------------------------------------
    def planner_loss_batch(self, windows: Sequence[ContextWindow], train: bool = False, rng=None) -> Tensor:
        i_hat, i_tgt, valid = self.planner_forward_batch(windows, train=train, rng=rng, detach_inputs=True)
        i_tgt = stop_gradient(i_tgt)
        mask = Tensor(valid[:, :, None].astype(self.dtype))
        d = T.mul(T.sub(i_hat, i_tgt), mask)
        return T.mul(T.sum_(T.mul(d, d)), 1.0 / len(windows))

    def executor_loss_batch(self, windows: Sequence[ContextWindow], train: bool = False, rng=None) -> Tensor:
        a_hat, loss_valid = self.executor_forward_batch(windows, train=train, rng=rng)
        target = Tensor(np.stack([w.actions for w in windows]).astype(self.dtype))
        mask = Tensor(loss_valid[:, :, None].astype(self.dtype))
        d = T.mul(T.sub(a_hat, target), mask)
        return T.mul(T.sum_(T.mul(d, d)), 1.0 / len(windows))

    def bc_loss_batch(self, planner_windows, executor_windows, train: bool = False, rng=None) -> Tensor:
        i_hat, _, _ = self.planner_forward_batch(planner_windows, train=train, rng=rng, detach_inputs=False)
        k_pl = self.cfg.planner.context_size
        k_ex = self.cfg.executor.context_size
        i_cond = i_hat[:, k_pl - k_ex :] if k_ex < k_pl else i_hat
        a_hat, loss_valid = self.executor_forward_batch(executor_windows, i_hat_cond=i_cond, train=train, rng=rng)
        target = Tensor(np.stack([w.actions for w in executor_windows]).astype(self.dtype))
        mask = Tensor(loss_valid[:, :, None].astype(self.dtype))
        d = T.mul(T.sub(a_hat, target), mask)
        return T.mul(T.sum_(T.mul(d, d)), 1.0 / len(executor_windows))

    def planner_loss(self, traj: Trajectory, train: bool = False, rng=None) -> Tensor:
        return self.planner_loss_batch([self.planner_context(traj)], train=train, rng=rng)

    def executor_loss(self, traj: Trajectory, train: bool = False, rng=None) -> Tensor:
        if not traj.present["a"]:
            raise ContractError("executor loss requires actions")
        return self.executor_loss_batch([self.executor_context(traj)], train=train, rng=rng)

    def bc_loss(self, traj: Trajectory, train: bool = False, rng=None) -> Tensor:
        if not (traj.present["g"] and traj.present["I"] and traj.present["p"] and traj.present["a"]):
            raise ContractError("behavior cloning requires a fully sensorimotor trajectory with a task spec")
        t_end = traj.length
        return self.bc_loss_batch(
            [self.planner_context(traj, t_end)], [self.executor_context(traj, t_end=t_end)], train=train, rng=rng
        )

    # -- deployment ----------------------------------------------------------
    def plan(self, context: ContextWindow) -> np.ndarray:
        """(n_valid_steps, h) predicted future embeddings, one per image token."""
        i_hat, _, valid = self.planner_forward_batch([context], train=False)
        return i_hat.data[0][valid[0]]

    def execute(self, context: ContextWindow) -> np.ndarray:
        """Action for the final step of the context; requires i_hat_targets."""
        if context.i_hat_targets is None:
            raise ContractError("execute requires predicted-future conditioning in the context")
        a_hat, _ = self.executor_forward_batch([context], train=False)
        return a_hat.data[0, -1].copy()

    def planner_last_block_fraction(self) -> float:
        """Trainable share of the planner-last-layer finetuning scope."""
        named = dict(self.named_parameters())
        scope = sum(named[n].data.size for n in self.planner_last_block_names())
        return scope / self.num_parameters()

    def act(
        self,
        goal_image: np.ndarray,
        images: np.ndarray,
        proprio: np.ndarray,
        past_actions: np.ndarray,
    ) -> np.ndarray:
        """Closed-loop action from raw history; replans every step."""
        t = images.shape[0]
        if t < 1:
            raise ContractError("act needs at least one observation")
        a_dim = self.cfg.encoder.action_dim
        acts = np.zeros((t, a_dim), dtype=np.float32)
        if past_actions is not None and len(past_actions) >= t - 1 and t > 1:
            acts[: t - 1] = past_actions[: t - 1]
        traj = Trajectory(goal_image=goal_image, images=images, proprio=proprio, actions=acts)
        pw = self.planner_context(traj, t_end=t)
        i_hat = self.plan(pw)  # (n_valid, h)
        k_ex = self.cfg.executor.context_size
        n_ex = min(t, k_ex)
        targets = np.zeros((k_ex, self.cfg.hidden_dim), dtype=np.float32)
        targets[k_ex - n_ex :] = i_hat[len(i_hat) - n_ex :]
        ew = self.executor_context(traj, i_hat_targets=targets, t_end=t)
        return self.execute(ew)

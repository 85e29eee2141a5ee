import numpy as np
import pytest

from plex import tensor as T
from plex.encoders import EncoderConfig
from plex.errors import ContractError
from plex.model import ContextWindow, PlexConfig, PlexModel, assemble_planner_context
from plex.tensor import Tape, backward
from plex.trajectory import Trajectory
from plex.transformer import TransformerConfig

from oracles import executor_loss_loops, planner_loss_loops


def tiny_config(use_returns=False, k_pl=4, k_ex=3, h=16, pos="relative", dropout=0.0):
    return PlexConfig(
        hidden_dim=h,
        planner=TransformerConfig(1, 2, h, context_size=k_pl, pos_mode=pos, t_max=128, dropout=dropout),
        executor=TransformerConfig(1, 2, h, context_size=k_ex, pos_mode=pos, t_max=128, dropout=dropout),
        encoder=EncoderConfig(image_hw=12, crop_ratio=1.0, conv_channels=(4, 8), conv_strides=(2, 2), mlp_hidden=(8,)),
        lookahead=1,
        use_returns=use_returns,
    )


def make_traj(rng, t=4, hw=12, with_g=True, with_p=True, with_a=True, with_r=True):
    return Trajectory(
        goal_image=rng.random((hw, hw, 3)).astype(np.float32) if with_g else None,
        images=rng.random((t, hw, hw, 3)).astype(np.float32),
        proprio=rng.random((t, 2)).astype(np.float32) if with_p else None,
        actions=rng.uniform(-1, 1, (t, 2)).astype(np.float32) if with_a else None,
        returns=-np.arange(t, 0, -1).astype(np.float32) if with_r else None,
    )


@pytest.fixture(scope="module")
def model():
    return PlexModel(tiny_config(), seed=0)


@pytest.fixture(scope="module")
def model64():
    # contexts cover whole length-4 trajectories so the no-windowing oracle applies
    return PlexModel(tiny_config(k_pl=5, k_ex=4), seed=0, dtype=np.float64)


# ---------------------------------------------------------------------------
# context assembly and routing
# ---------------------------------------------------------------------------


def test_planner_context_single_step_layout(model):
    traj = make_traj(np.random.default_rng(0), t=1, with_r=False)
    win = model.planner_context(traj)
    layout = [tag for tag, _, v in win.token_layout() if v or tag == "g"]
    assert layout == ["g", "I"]


def test_planner_context_window_arithmetic():
    rng = np.random.default_rng(1)
    traj = make_traj(rng, t=40)
    win = assemble_planner_context(traj, t_end=40, use_returns=False, steps=30, lookahead=1)
    assert win.valid.all()
    assert list(win.timesteps) == list(range(11, 41))  # exactly the last 30 steps


def test_planner_context_left_padding():
    rng = np.random.default_rng(2)
    traj = make_traj(rng, t=2)
    win = assemble_planner_context(traj, t_end=2, use_returns=False, steps=5, lookahead=1)
    assert list(win.valid) == [False, False, False, True, True]
    assert list(win.timesteps[3:]) == [1, 2]
    # target rows clamp at the final frame
    assert np.array_equal(win.images_ext[5], traj.images[1])


def test_planner_context_requires_goal(model):
    traj = make_traj(np.random.default_rng(3), with_g=False)
    with pytest.raises(ContractError):
        model.planner_context(traj)


def test_executor_context_routing_and_boundary(model):
    traj = make_traj(np.random.default_rng(4), t=3)
    win = model.executor_context(traj)
    tags = {tag for tag, _, _ in win.token_layout()}
    assert "g" not in tags and "R" not in tags
    assert win.goal_image is None and win.returns is None
    assert win.prev_action_is_placeholder[0] == True  # noqa: E712  (step 1 slot)
    assert np.array_equal(win.prev_actions[1], traj.actions[0])
    assert np.array_equal(win.prev_actions[2], traj.actions[1])


def test_executor_loss_valid_range(model):
    traj = make_traj(np.random.default_rng(5), t=3)
    win = model.executor_context(traj)
    assert list(win.timesteps) == [1, 2, 3]
    assert list(win.loss_valid) == [True, True, False]  # exactly T-1 terms


def test_routing_validation_rejects_bad_contexts(model):
    traj = make_traj(np.random.default_rng(6), t=3)
    win = model.executor_context(traj)
    win.goal_image = traj.goal_image  # task data must never ride in an executor context
    with pytest.raises(ContractError):
        win.validate_routing()
    win2 = model.executor_context(traj)
    win2.kind = "elsewhere"
    with pytest.raises(ContractError):
        win2.validate_routing()


# ---------------------------------------------------------------------------
# plan / execute
# ---------------------------------------------------------------------------


def test_plan_output_count_and_lookahead_default(model):
    assert model.cfg.lookahead == 1
    traj = make_traj(np.random.default_rng(7), t=3)
    preds = model.plan(model.planner_context(traj))
    assert preds.shape == (3, model.cfg.hidden_dim)


def test_plan_causality_probe(model):
    rng = np.random.default_rng(8)
    traj = make_traj(rng, t=4)
    base = model.plan(model.planner_context(traj))
    pert = Trajectory(
        goal_image=traj.goal_image,
        images=traj.images.copy(),
        proprio=traj.proprio,
        actions=traj.actions,
        returns=traj.returns,
    )
    pert.images[2] = rng.random(pert.images[2].shape).astype(np.float32)  # step 3
    out = model.plan(model.planner_context(pert))
    assert np.array_equal(out[:2], base[:2])  # predictions made at steps 1,2 untouched
    assert np.abs(out[2:] - base[2:]).max() > 0


def test_execute_bounds_and_sensitivity(model):
    rng = np.random.default_rng(9)
    traj = make_traj(rng, t=3)
    targets = rng.standard_normal((3, model.cfg.hidden_dim)).astype(np.float32)
    win = model.executor_context(traj, i_hat_targets=targets)
    a = model.execute(win)
    assert a.shape == (2,)
    assert np.abs(a).max() <= 1.0
    targets2 = targets.copy()
    targets2[-1] += 1.0
    a2 = model.execute(model.executor_context(traj, i_hat_targets=targets2))
    assert np.abs(a - a2).max() > 0


def test_execute_single_step_history(model):
    traj = make_traj(np.random.default_rng(10), t=1)
    targets = np.zeros((3, model.cfg.hidden_dim), dtype=np.float32)
    a = model.execute(model.executor_context(traj, i_hat_targets=targets))
    assert np.abs(a).max() <= 1.0


def test_act_matches_plan_execute_composition(model):
    rng = np.random.default_rng(11)
    traj = make_traj(rng, t=3)
    acting = model.act(traj.goal_image, traj.images, traj.proprio, traj.actions[:2])
    # manual composition
    pw = model.planner_context(traj, t_end=3)
    i_hat = model.plan(pw)
    k_ex = model.cfg.executor.context_size
    targets = np.zeros((k_ex, model.cfg.hidden_dim), dtype=np.float32)
    targets[k_ex - 3 :] = i_hat[-3:]
    manual = model.execute(model.executor_context(traj, i_hat_targets=targets, t_end=3))
    assert np.array_equal(acting, manual)
    assert np.array_equal(acting, model.act(traj.goal_image, traj.images, traj.proprio, traj.actions[:2]))


# ---------------------------------------------------------------------------
# losses against the brute-force loop oracles
# ---------------------------------------------------------------------------


def embed_frames(m, frames):
    return m.enc.encode_images(frames).data


def test_planner_loss_matches_loop_oracle(model64):
    for t in (1, 2, 3, 4):
        rng = np.random.default_rng(20 + t)
        traj = make_traj(rng, t=t)
        i_tilde = embed_frames(model64, traj.images)
        i_hat = model64.plan(model64.planner_context(traj))
        want = planner_loss_loops(i_tilde, i_hat, model64.cfg.lookahead)
        got = model64.planner_loss(traj).item()
        assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_planner_loss_hand_example_via_oracle():
    # T=2, L=1, h=1 with embeddings [1, 2], predictions [0, 0]: terms (2-0)^2 + (2-0)^2
    assert planner_loss_loops(np.array([[1.0], [2.0]]), np.array([[0.0], [0.0]]), 1) == 8.0


def test_planner_loss_zero_when_predictions_equal_targets():
    i_tilde = np.random.default_rng(21).standard_normal((3, 5))
    shifted = np.vstack([i_tilde[1:], i_tilde[-1:]])  # exact lookahead-1 targets w/ padding
    assert planner_loss_loops(i_tilde, shifted, 1) == 0.0


def test_executor_loss_matches_loop_oracle(model64):
    for t in (2, 3, 4):
        rng = np.random.default_rng(30 + t)
        traj = make_traj(rng, t=t)
        win = model64.executor_context(traj)
        a_hat, _ = model64.executor_forward_batch([win])
        a_rows = a_hat.data[0][win.valid]
        want = executor_loss_loops(traj.actions, a_rows)
        got = model64.executor_loss(traj).item()
        assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_executor_loss_t3_has_two_terms():
    acts = np.array([[0.5, 0.0], [0.0, 0.5], [1.0, 1.0]])
    a_hat = np.zeros_like(acts)
    assert executor_loss_loops(acts, a_hat) == pytest.approx(0.25 + 0.25)


def test_bc_loss_equals_executor_loss_with_substituted_targets(model64):
    rng = np.random.default_rng(40)
    traj = make_traj(rng, t=4)
    bc = model64.bc_loss(traj).item()
    pw = model64.planner_context(traj)
    i_hat = model64.plan(pw)
    k_ex = model64.cfg.executor.context_size
    targets = i_hat[-k_ex:]
    win = model64.executor_context(traj, i_hat_targets=targets)
    a_hat, loss_valid = model64.executor_forward_batch([win])
    d = (a_hat.data[0] - win.actions) * loss_valid[0][:, None]
    assert bc == pytest.approx(float((d**2).sum()), rel=1e-9, abs=1e-9)


def test_loss_preconditions(model):
    rng = np.random.default_rng(41)
    with pytest.raises(ContractError):
        model.executor_loss(make_traj(rng, with_a=False))
    with pytest.raises(ContractError):
        model.planner_loss(make_traj(rng, with_g=False))
    with pytest.raises(ContractError):
        model.bc_loss(make_traj(rng, with_p=False))


# ---------------------------------------------------------------------------
# stopgrad routing
# ---------------------------------------------------------------------------


def grads_abs_sum(model, names):
    params = dict(model.named_parameters())
    total = 0.0
    for n in names:
        g = params[n].grad
        if g is not None:
            total += float(np.abs(g).sum())
    return total


def test_planner_loss_never_touches_image_or_task_encoders(model):
    traj = make_traj(np.random.default_rng(50), t=4)
    model.zero_grad()
    with Tape() as tape:
        backward(model.planner_loss(traj), tape)
    assert grads_abs_sum(model, model.image_and_task_param_names()) == 0.0
    # but the planner itself trains
    pl = [n for n, _ in model.named_parameters() if n.startswith("planner.")]
    assert grads_abs_sum(model, pl) > 0.0


def test_executor_loss_reaches_encoders(model):
    traj = make_traj(np.random.default_rng(51), t=4)
    model.zero_grad()
    with Tape() as tape:
        backward(model.executor_loss(traj), tape)
    assert grads_abs_sum(model, model.enc.image_param_names()) > 0.0
    proprio_names = [f"enc.proprio.{n}" for n, _ in model.enc.proprio.named_parameters()]
    action_names = [f"enc.action.{n}" for n, _ in model.enc.action.named_parameters()]
    assert grads_abs_sum(model, proprio_names) > 0.0
    assert grads_abs_sum(model, action_names) > 0.0
    # no planner involvement, no task-projection involvement
    assert grads_abs_sum(model, [n for n, _ in model.named_parameters() if n.startswith("planner")]) == 0.0
    assert grads_abs_sum(model, model.enc.task_param_names()) == 0.0


def test_bc_loss_reaches_planner_and_encoders(model):
    traj = make_traj(np.random.default_rng(52), t=4)
    model.zero_grad()
    with Tape() as tape:
        backward(model.bc_loss(traj), tape)
    assert grads_abs_sum(model, [n for n, _ in model.named_parameters() if n.startswith("planner.")]) > 0.0
    assert grads_abs_sum(model, model.enc.image_param_names()) > 0.0
    assert grads_abs_sum(model, model.enc.task_param_names()) > 0.0


def test_missing_rewards_use_placeholder_and_spare_phi_r():
    m = PlexModel(tiny_config(use_returns=True), seed=1)
    traj = make_traj(np.random.default_rng(53), t=3, with_r=False)
    m.zero_grad()
    with Tape() as tape:
        backward(m.planner_loss(traj), tape)
    reward_names = [f"enc.reward.{n}" for n, _ in m.enc.reward.named_parameters()]
    assert grads_abs_sum(m, reward_names) == 0.0
    assert np.abs(m.enc.placeholders.R.grad).max() > 0.0


def test_present_rewards_train_phi_r():
    m = PlexModel(tiny_config(use_returns=True), seed=2)
    traj = make_traj(np.random.default_rng(54), t=3, with_r=True)
    m.zero_grad()
    with Tape() as tape:
        backward(m.planner_loss(traj), tape)
    reward_names = [f"enc.reward.{n}" for n, _ in m.enc.reward.named_parameters()]
    assert grads_abs_sum(m, reward_names) > 0.0

import json
import os

import numpy as np
import pytest

from plex.checkpoint import load_checkpoint, save_checkpoint
from plex.cli import main as cli_main
from plex.config import desk_config, from_dict, load_config, save_config, to_dict
from plex.encoders import EncoderConfig
from plex.errors import ContractError, FormatError
from plex.evaluate import EvalReport, PlexAgent, RandomAgent, ScriptedOracleAgent, eval_protocol, evaluate, rollout
from plex.experiments import bc_model_config, benchmark_tasks
from plex.metrics import MetricsLog, read_metrics
from plex.model import PlexConfig, PlexModel
from plex.transformer import TransformerConfig


def micro_plex():
    return PlexConfig(
        hidden_dim=16,
        planner=TransformerConfig(1, 2, 16, context_size=4, pos_mode="relative", t_max=128, dropout=0.0),
        executor=TransformerConfig(1, 2, 16, context_size=3, pos_mode="relative", t_max=128, dropout=0.0),
        encoder=EncoderConfig(mlp_hidden=(8,), conv_channels=(4, 8), conv_strides=(2, 2)),
    )


@pytest.fixture(scope="module")
def world():
    cfg = desk_config()
    cfg.model = micro_plex()
    cfg.eval.episodes_per_task = 4
    train, target = benchmark_tasks(cfg)
    return cfg, train, target


# ---------------------------------------------------------------------------
# rollout / evaluate
# ---------------------------------------------------------------------------


def test_oracle_policy_wins_everywhere(world):
    cfg, train, target = world
    rates = evaluate(lambda t: ScriptedOracleAgent(cfg.env), train + target, 4, cfg.env, base_seed=0)
    assert all(r == 1.0 for r in rates.values())


def test_zero_action_like_policy_fails(world):
    cfg, _train, target = world

    class StillAgent:
        def reset(self, task, rng):
            pass

        def act(self, image, proprio, last_reward=None):
            return np.zeros(2)

    rates = evaluate(lambda t: StillAgent(), target, 3, cfg.env, base_seed=0)
    assert all(r == 0.0 for r in rates.values())


def test_rollout_fixed_seed_identical(world):
    cfg, _train, target = world
    model = PlexModel(cfg.model, seed=0)
    a = rollout(PlexAgent(model), target[0], cfg.env, seed=7)
    b = rollout(PlexAgent(model), target[0], cfg.env, seed=7)
    assert a.success == b.success
    assert np.array_equal(a.trajectory.actions, b.trajectory.actions)


def test_rollout_actions_bounded_and_exonly_structural(world):
    cfg, _train, target = world
    model = PlexModel(cfg.model, seed=1)
    agent = PlexAgent(model, conditioning="goal_embedding")
    res = rollout(agent, target[0], cfg.env, seed=3, max_steps=10)
    assert np.abs(res.trajectory.actions).max() <= 1.0
    assert agent.conditioning == "goal_embedding"
    with pytest.raises(ContractError):
        PlexAgent(model, conditioning="dreams")


def test_agent_matches_act_composition(world):
    cfg, _train, target = world
    model = PlexModel(cfg.model, seed=2)
    res = rollout(PlexAgent(model), target[0], cfg.env, seed=11, max_steps=6)
    tr = res.trajectory
    for t in range(1, tr.length + 1):
        via_act = model.act(tr.goal_image, tr.images[:t], tr.proprio[:t], tr.actions[: t - 1])
        assert np.allclose(via_act, tr.actions[t - 1], atol=1e-5)


def test_evaluate_order_invariance(world):
    cfg, _train, target = world
    rates_fwd = evaluate(lambda t: RandomAgent(), target, 6, cfg.env, base_seed=5)
    rates_rev = evaluate(lambda t: RandomAgent(), list(reversed(target)), 6, cfg.env, base_seed=5)
    assert rates_fwd == {k: rates_rev[k] for k in rates_fwd}
    with pytest.raises(ContractError):
        evaluate(lambda t: RandomAgent(), target, 0, cfg.env)


# ---------------------------------------------------------------------------
# eval protocol
# ---------------------------------------------------------------------------


def test_protocol_best_epoch_is_max():
    rates = iter([{"a": 0.1}, {"a": 0.5}, {"a": 0.3}])
    report = eval_protocol(lambda e: None, 3, lambda: next(rates))
    assert report.success_curve == [0.1, 0.5, 0.3]
    assert report.best_rate == 0.5
    assert report.best_epoch == 1


def test_protocol_zero_epochs_evaluates_once():
    calls = {"train": 0, "eval": 0}

    def eval_fn():
        calls["eval"] += 1
        return {"a": 0.25}

    report = eval_protocol(lambda e: calls.__setitem__("train", calls["train"] + 1), 0, eval_fn)
    assert calls == {"train": 0, "eval": 1}
    assert report.best_rate == 0.25


def test_report_json_round_trip():
    rep = EvalReport(success_curve=[0.2, 0.4], best_rate=0.4, best_epoch=1, seed=3, config_fingerprint="abc")
    payload = json.loads(rep.to_json())
    assert payload["best_rate"] == 0.4
    assert payload["seed"] == 3


def test_metrics_log_round_trip(tmp_path):
    path = str(tmp_path / "m.jsonl")
    log = MetricsLog(path)
    log.log("stage_a", 0, loss=1.5)
    log.log("stage_a", 1, loss=1.0, success_rate=0.5)
    back = read_metrics(path)
    assert back == log.records
    assert all(r["schema_version"] == 1 for r in back)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_bit_exact_round_trip(tmp_path, world):
    cfg, _train, _target = world
    model = PlexModel(cfg.model, seed=4)
    p1 = str(tmp_path / "m.plxc")
    p2 = str(tmp_path / "m2.plxc")
    save_checkpoint(model, p1, config={"note": 1})
    conf, state = load_checkpoint(p1)
    assert conf == {"note": 1}
    clone = PlexModel(cfg.model, seed=99)
    clone.load_state_dict(state)
    for (n1, a), (n2, b) in zip(model.named_parameters(), clone.named_parameters()):
        assert n1 == n2 and np.array_equal(a.data, b.data)
    save_checkpoint(clone, p2, config={"note": 1})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_truncation_detected(tmp_path, world):
    cfg, _train, _target = world
    model = PlexModel(cfg.model, seed=5)
    path = tmp_path / "m.plxc"
    save_checkpoint(model, str(path))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(FormatError):
        load_checkpoint(str(path))


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def test_config_json_round_trip(tmp_path):
    cfg = desk_config(seed=11)
    cfg.model.planner.pos_mode = "global"
    path = str(tmp_path / "cfg.json")
    save_config(cfg, path)
    back = load_config(path)
    assert to_dict(back) == to_dict(cfg)
    assert back.model.planner.pos_mode == "global"
    with pytest.raises(ContractError):
        from_dict({"nonsense": 1})


def test_bc_mode_flavors():
    base = micro_plex()
    for mode, pos, rew in [
        ("relative", "relative", False),
        ("absolute", "absolute", False),
        ("global", "global", False),
        ("global_returns", "global", True),
    ]:
        flav = bc_model_config(base, mode)
        assert flav.planner.pos_mode == pos
        assert flav.executor.pos_mode == pos
        assert flav.use_returns == rew
    with pytest.raises(ContractError):
        bc_model_config(base, "rotary")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def test_cli_gen_data_and_inspect(tmp_path, capsys):
    cfg = desk_config()
    cfg.model = micro_plex()
    cfg.data.n_train_tasks = 2
    cfg.data.n_target_tasks = 2
    cfg.data.mtvd_per_task = 2
    cfg.data.vmt_per_task = 2
    cfg.data.ttd_count = 2
    cfg.data.ttd_pool = 4
    cfg_path = str(tmp_path / "cfg.json")
    save_config(cfg, cfg_path)
    out = str(tmp_path / "data")
    assert cli_main(["gen-data", "--config", cfg_path, "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "mtvd.plxd"))
    assert cli_main(["inspect-dataset", os.path.join(out, "vmt.plxd")]) == 0
    text = capsys.readouterr().out
    assert "kind: vmt" in text
    assert "trajectories: 4" in text


def test_cli_missing_dataset_path_errors(tmp_path):
    cfg = desk_config()
    cfg.model = micro_plex()
    cfg_path = str(tmp_path / "cfg.json")
    save_config(cfg, cfg_path)
    rc = cli_main(["pretrain", "--config", cfg_path, "--out", str(tmp_path / "o"), "--data", str(tmp_path / "nope")])
    assert rc == 2

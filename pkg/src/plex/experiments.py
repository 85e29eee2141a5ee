"""Experiment drivers: zero-shot generalization, executor-only baseline,
video-only finetuning, full finetuning, and the positional-encoding ablation.

Dataset routing is fixed per experiment: zero-shot pretraining touches only
mtvd + vmt; the executor-only baseline touches only vmt; finetuning variants
additionally use ttd.
"""

from __future__ import annotations

import copy
import os
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig, to_dict
from .data import Dataset, generate_dataset, load_dataset, save_dataset
from .env import TaskSpec, make_tasks
from .errors import ContractError
from .evaluate import EvalReport, PlexAgent, RandomAgent, config_fingerprint, eval_protocol, evaluate
from .metrics import MetricsLog
from .model import PlexConfig, PlexModel
from .training import StageState, TrainConfig, finetune, pretrain_executor, pretrain_planner

EXPERIMENT_NAMES = ("zeroshot", "ex_only_baseline", "video_finetune", "full_finetune", "posenc_ablation")


def benchmark_tasks(cfg: ExperimentConfig) -> tuple[list[TaskSpec], list[TaskSpec]]:
    return make_tasks(cfg.env, cfg.data.n_train_tasks, cfg.data.n_target_tasks, seed=cfg.data.task_seed)


def build_datasets(cfg: ExperimentConfig, which: Sequence[str] = ("mtvd", "vmt", "ttd"), video_only_ttd: bool = True) -> dict[str, Dataset]:
    """Generate the benchmark corpora from the config's task split."""
    train_tasks, target_tasks = benchmark_tasks(cfg)
    out: dict[str, Dataset] = {}
    if "mtvd" in which:
        out["mtvd"] = generate_dataset("mtvd", train_tasks, cfg.data.mtvd_per_task, cfg.env, seed=cfg.seed)
    if "vmt" in which:
        out["vmt"] = generate_dataset(
            "vmt", target_tasks, cfg.data.vmt_per_task, cfg.env, seed=cfg.seed, noise_std=cfg.data.vmt_noise_std
        )
    if "ttd" in which:
        out["ttd"] = generate_dataset(
            "ttd",
            target_tasks,
            cfg.data.ttd_count,
            cfg.env,
            seed=cfg.seed,
            video_only=video_only_ttd,
            pool_size=cfg.data.ttd_pool,
        )
    return out


def _with_seed(train_cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(train_cfg, seed=seed)


def _param_checksums(model: PlexModel) -> dict[str, bytes]:
    return {n: p.data.tobytes() for n, p in model.named_parameters()}


def pretrained_pipeline(
    cfg: ExperimentConfig,
    seed: int,
    datasets: dict[str, Dataset],
    log: Optional[MetricsLog] = None,
    skip_planner: bool = False,
) -> dict:
    """Run the two pretraining stages and evaluate the staged baselines.

    Returns the model plus success rates for: random policy, the executor-only
    goal-conditioned baseline (measured before any planner training), and,
    unless ``skip_planner``, the full zero-shot model.
    """
    log = log or MetricsLog()
    _train_tasks, target_tasks = benchmark_tasks(cfg)
    model = PlexModel(cfg.model, seed=seed)
    stage = StageState()
    planner_init = {n: p.data.tobytes() for n, p in model.named_parameters() if n.startswith("planner")}

    random_rates = evaluate(
        lambda task: RandomAgent(), target_tasks, cfg.eval.episodes_per_task, cfg.env, base_seed=seed, max_steps=cfg.eval.max_steps
    )
    log.log("random_baseline", 0, success_rate=float(np.mean(list(random_rates.values()))))

    ex_cfg = _with_seed(cfg.pretrain_executor, seed)
    curve = pretrain_executor(model, datasets["vmt"].trajectories, ex_cfg, stage)
    for ep, loss in enumerate(curve):
        log.log("pretrain_executor", ep, loss=loss)

    exonly_rates = evaluate(
        lambda task: PlexAgent(model, conditioning="goal_embedding"),
        target_tasks,
        cfg.eval.episodes_per_task,
        cfg.env,
        base_seed=seed,
        max_steps=cfg.eval.max_steps,
    )
    log.log("ex_only_eval", 0, success_rate=float(np.mean(list(exonly_rates.values()))))
    planner_now = {n: p.data.tobytes() for n, p in model.named_parameters() if n.startswith("planner")}
    planner_untouched = planner_now == planner_init

    result = {
        "model": model,
        "stage": stage,
        "target_tasks": target_tasks,
        "random_rates": random_rates,
        "exonly_rates": exonly_rates,
        "planner_untouched_at_exonly_eval": planner_untouched,
    }
    if skip_planner:
        return result

    pl_cfg = _with_seed(cfg.pretrain_planner, seed)
    curve = pretrain_planner(model, datasets["mtvd"].trajectories, pl_cfg, stage)
    for ep, loss in enumerate(curve):
        log.log("pretrain_planner", ep, loss=loss)

    zeroshot_rates = evaluate(
        lambda task: PlexAgent(model, conditioning="planner"),
        target_tasks,
        cfg.eval.episodes_per_task,
        cfg.env,
        base_seed=seed,
        max_steps=cfg.eval.max_steps,
    )
    log.log("zeroshot_eval", 0, success_rate=float(np.mean(list(zeroshot_rates.values()))))
    result["zeroshot_rates"] = zeroshot_rates
    return result


def video_finetune_stage(
    cfg: ExperimentConfig,
    seed: int,
    model: PlexModel,
    stage: StageState,
    ttd: Dataset,
    target_tasks: Sequence[TaskSpec],
    log: Optional[MetricsLog] = None,
    scope: str = "planner_last_layer",
) -> EvalReport:
    """Best-epoch finetuning protocol on target demonstrations."""
    log = log or MetricsLog()
    ft_cfg = _with_seed(cfg.finetune, seed)

    def eval_fn():
        return evaluate(
            lambda task: PlexAgent(model, conditioning="planner"),
            target_tasks,
            cfg.eval.episodes_per_task,
            cfg.env,
            base_seed=seed,
            max_steps=cfg.eval.max_steps,
        )

    one_epoch = replace(ft_cfg, epochs=1)
    epoch_counter = {"i": 0}

    def train_epoch(_epoch: int):
        ec = replace(one_epoch, seed=ft_cfg.seed + 1000 * epoch_counter["i"])
        info = finetune(model, ttd.trajectories, ec, stage, scope=scope)
        log.log(f"finetune_{scope}", epoch_counter["i"], loss=info["curve"][-1], trainable_fraction=info["trainable_fraction"])
        epoch_counter["i"] += 1

    report = eval_protocol(train_epoch, ft_cfg.epochs, eval_fn, seed=seed, fingerprint=config_fingerprint(to_dict(cfg)))
    for ep, rate in enumerate(report.success_curve):
        log.log(f"finetune_{scope}_eval", ep, success_rate=rate)
    return report


def bc_model_config(base: PlexConfig, mode: str) -> PlexConfig:
    """Single-task behavior-cloning flavor for one positional-encoding mode."""
    if mode not in ("relative", "absolute", "global", "global_returns"):
        raise ContractError(f"unknown ablation mode {mode!r}")
    pos = "global" if mode == "global_returns" else mode
    cfg = copy.deepcopy(base)
    cfg.planner = replace(cfg.planner, pos_mode=pos)
    cfg.executor = replace(cfg.executor, pos_mode=pos)
    cfg.use_returns = mode == "global_returns"
    return cfg


def run_bc_single_task(
    cfg: ExperimentConfig,
    mode: str,
    demos: Sequence,
    seed: int,
    task: TaskSpec,
    log: Optional[MetricsLog] = None,
) -> EvalReport:
    """Train one BC-mode model from scratch on one task's demos; best-epoch protocol."""
    log = log or MetricsLog()
    model = PlexModel(bc_model_config(cfg.model, mode), seed=seed)
    stage = StageState()
    bc_cfg = _with_seed(cfg.bc, seed)
    return_range = None
    if mode == "global_returns":
        firsts = [float(t.returns[0]) for t in demos if t.returns is not None]
        return_range = (min(firsts), max(firsts)) if firsts else None

    def eval_fn():
        return evaluate(
            lambda _task: PlexAgent(model, conditioning="planner", return_range=return_range),
            [task],
            cfg.eval.episodes_per_task,
            cfg.env,
            base_seed=seed,
            max_steps=cfg.eval.max_steps,
        )

    one_epoch = replace(bc_cfg, epochs=1)
    counter = {"i": 0}

    def train_epoch(_epoch: int):
        ec = replace(one_epoch, seed=bc_cfg.seed + 1000 * counter["i"])
        info = finetune(model, demos, ec, stage, scope="full_bc")
        log.log(f"bc_{mode}", counter["i"], loss=info["curve"][-1])
        counter["i"] += 1

    return eval_protocol(train_epoch, bc_cfg.epochs, eval_fn, seed=seed, fingerprint=config_fingerprint(to_dict(cfg)))


def run_posenc_ablation(
    cfg: ExperimentConfig,
    log: Optional[MetricsLog] = None,
    sizes: Optional[Sequence[int]] = None,
    modes: Optional[Sequence[str]] = None,
    seeds: Optional[Sequence[int]] = None,
) -> dict:
    """BC-mode grid over encodings x demo-set sizes x seeds on one target task."""
    log = log or MetricsLog()
    sizes = list(sizes if sizes is not None else cfg.ablation.sizes)
    modes = list(modes if modes is not None else cfg.ablation.modes)
    seeds = list(seeds if seeds is not None else cfg.ablation.seeds)
    _train_tasks, target_tasks = benchmark_tasks(cfg)
    task = target_tasks[cfg.ablation.task_index]
    pool = generate_dataset(
        "ttd", [task], max(sizes), cfg.env, seed=cfg.seed, style=cfg.ablation.style, pool_size=cfg.data.ttd_pool
    ).trajectories

    table: dict[str, dict[int, list[float]]] = {m: {s: [] for s in sizes} for m in modes}
    for mode in modes:
        for size in sizes:
            for seed in seeds:
                order = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, size])).permutation(len(pool))
                demos = [pool[i] for i in order[:size]]
                report = run_bc_single_task(cfg, mode, demos, seed, task, log=log)
                table[mode][size].append(report.best_rate)
                log.log("posenc_ablation", 0, success_rate=report.best_rate, mode=mode, size=size, run_seed=seed)
    medians = {m: {s: float(np.median(v)) for s, v in per.items()} for m, per in table.items()}
    return {"task": task.task_id, "rates": table, "medians": medians, "sizes": sizes, "modes": modes, "seeds": seeds}


def format_ablation_table(result: dict) -> str:
    lines = ["demos  " + "  ".join(f"{m:>15s}" for m in result["modes"])]
    for s in result["sizes"]:
        row = [f"{s:>5d}"] + [f"{result['medians'][m][s]:15.2f}" for m in result["modes"]]
        lines.append("  ".join(row))
    return "\n".join(lines)


def run_experiment(name: str, cfg: ExperimentConfig, out_dir: Optional[str] = None, datasets: Optional[dict] = None) -> EvalReport:
    """Orchestrate one named experiment; persists metrics/report/checkpoint under out_dir."""
    if name not in EXPERIMENT_NAMES:
        raise ContractError(f"unknown experiment {name!r}; choose from {EXPERIMENT_NAMES}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    log = MetricsLog(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)
    fp = config_fingerprint(to_dict(cfg))
    seed = cfg.seed

    if name == "posenc_ablation":
        result = run_posenc_ablation(cfg, log=log)
        report = EvalReport(seed=seed, config_fingerprint=fp, extra=result)
        rel = result["medians"].get("relative", {})
        report.success_curve = [rel[s] for s in result["sizes"] if s in rel]
        report.best_rate = max(report.success_curve) if report.success_curve else 0.0
    else:
        needed = ("vmt",) if name == "ex_only_baseline" else (("mtvd", "vmt") if name == "zeroshot" else ("mtvd", "vmt", "ttd"))
        if datasets is None:
            datasets = build_datasets(cfg, which=needed, video_only_ttd=name != "full_finetune")
        missing = [k for k in needed if k not in datasets]
        if missing:
            raise ContractError(f"experiment {name!r} needs datasets {missing}")
        pipe = pretrained_pipeline(cfg, seed, datasets, log=log, skip_planner=name == "ex_only_baseline")
        if name == "ex_only_baseline":
            rates = pipe["exonly_rates"]
            report = EvalReport(
                per_task_rates=[rates],
                success_curve=[float(np.mean(list(rates.values())))],
                seed=seed,
                config_fingerprint=fp,
                extra={"planner_untouched": pipe["planner_untouched_at_exonly_eval"], "random_rates": pipe["random_rates"]},
            )
            report.best_rate = report.success_curve[0]
        elif name == "zeroshot":
            rates = pipe["zeroshot_rates"]
            report = EvalReport(
                per_task_rates=[rates],
                success_curve=[float(np.mean(list(rates.values())))],
                seed=seed,
                config_fingerprint=fp,
                extra={"exonly_rates": pipe["exonly_rates"], "random_rates": pipe["random_rates"]},
            )
            report.best_rate = report.success_curve[0]
        else:  # video_finetune / full_finetune
            scope = "planner_last_layer" if name == "video_finetune" else "planner_exec_last_layers_head"
            report = video_finetune_stage(
                cfg, seed, pipe["model"], pipe["stage"], datasets["ttd"], pipe["target_tasks"], log=log, scope=scope
            )
            report.extra["zeroshot_rates"] = pipe["zeroshot_rates"]
            report.extra["exonly_rates"] = pipe["exonly_rates"]
            report.extra["random_rates"] = pipe["random_rates"]
        if out_dir:
            save_checkpoint(pipe["model"], os.path.join(out_dir, "model.plxc"), config=to_dict(cfg))

    if out_dir:
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
    return report

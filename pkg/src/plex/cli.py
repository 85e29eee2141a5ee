"""Command-line surface: gen-data, pretrain, finetune, evaluate, experiment,
gradcheck, inspect-dataset. Exit code 0 means the run completed and every
invariant assertion held."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, desk_config, load_config, save_config, to_dict
from .data import load_dataset, save_dataset
from .errors import PlexError
from .evaluate import PlexAgent, config_fingerprint, evaluate
from .experiments import (
    EXPERIMENT_NAMES,
    benchmark_tasks,
    build_datasets,
    format_ablation_table,
    pretrained_pipeline,
    run_experiment,
    video_finetune_stage,
)
from .metrics import MetricsLog
from .model import PlexModel
from .training import FINETUNE_SCOPES, StageState, finetune


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (defaults mirror the desk-scale setup)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/out", help="output directory")


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    datasets = build_datasets(cfg, video_only_ttd=not args.full_ttd)
    for kind, ds in datasets.items():
        path = os.path.join(args.out, f"{kind}.plxd")
        save_dataset(ds, path)
        print(f"wrote {path}: {len(ds)} trajectories")
    save_config(cfg, os.path.join(args.out, "config.json"))
    return 0


def _datasets_from_dir(cfg, data_dir, which):
    if data_dir:
        out = {}
        for kind in which:
            path = os.path.join(data_dir, f"{kind}.plxd")
            if os.path.exists(path):
                out[kind] = load_dataset(path)
        missing = [k for k in which if k not in out]
        if missing:
            raise PlexError(f"missing dataset files in {data_dir}: {[m + '.plxd' for m in missing]}")
        return out
    return build_datasets(cfg, which=which)


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    log = MetricsLog(os.path.join(args.out, "metrics.jsonl"))
    datasets = _datasets_from_dir(cfg, args.data, ("mtvd", "vmt"))
    pipe = pretrained_pipeline(cfg, cfg.seed, datasets, log=log)
    save_checkpoint(pipe["model"], os.path.join(args.out, "model.plxc"), config=to_dict(cfg))
    zs = float(np.mean(list(pipe["zeroshot_rates"].values())))
    ex = float(np.mean(list(pipe["exonly_rates"].values())))
    print(f"zero-shot success {zs:.2f} | executor-only {ex:.2f} | checkpoint {args.out}/model.plxc")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    log = MetricsLog(os.path.join(args.out, "metrics.jsonl"))
    _cfg_dict, state = load_checkpoint(args.checkpoint)
    model = PlexModel(cfg.model, seed=cfg.seed)
    model.load_state_dict(state)
    stage = StageState(executor_pretrained=True, planner_pretrained=True)
    datasets = _datasets_from_dir(cfg, args.data, ("ttd",))
    _train, target_tasks = benchmark_tasks(cfg)
    report = video_finetune_stage(cfg, cfg.seed, model, stage, datasets["ttd"], target_tasks, log=log, scope=args.scope)
    save_checkpoint(model, os.path.join(args.out, "model.plxc"), config=to_dict(cfg))
    print(f"best-epoch success {report.best_rate:.2f} (epoch {report.best_epoch})")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    _cfg_dict, state = load_checkpoint(args.checkpoint)
    model = PlexModel(cfg.model, seed=cfg.seed)
    model.load_state_dict(state)
    _train, target_tasks = benchmark_tasks(cfg)
    episodes = 50 if args.full_eval else cfg.eval.episodes_per_task
    rates = evaluate(
        lambda task: PlexAgent(model, conditioning=args.conditioning),
        target_tasks,
        episodes,
        cfg.env,
        base_seed=cfg.seed,
        max_steps=cfg.eval.max_steps,
    )
    for task_id, rate in rates.items():
        print(f"{task_id}: {rate:.2f}")
    print(f"mean: {float(np.mean(list(rates.values()))):.2f}")
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_cfg(args)
    report = run_experiment(args.name, cfg, out_dir=args.out)
    if args.name == "posenc_ablation":
        print(format_ablation_table(report.extra))
    else:
        print(f"{args.name}: best rate {report.best_rate:.2f}")
        for key in ("zeroshot_rates", "exonly_rates", "random_rates"):
            if key in report.extra:
                print(f"  {key}: {report.extra[key]}")
    print(f"report: {os.path.join(args.out, 'report.json')}")
    return 0


def cmd_gradcheck(args) -> int:
    # deferred import keeps CLI start-up light
    from .verification import full_model_grad_check

    results = full_model_grad_check(sample_per_param=args.sample)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name}: max rel err {err:.3e}")
    ok = worst <= 1e-4
    print(f"worst {worst:.3e} -> {'PASS' if ok else 'FAIL'} (tolerance 1e-4)")
    return 0 if ok else 1


def cmd_inspect_dataset(args) -> int:
    ds = load_dataset(args.path)
    lengths = [t.length for t in ds.trajectories]
    print(f"kind: {ds.kind}")
    print(f"trajectories: {len(ds)}")
    print(f"lengths: min {min(lengths)} / median {int(np.median(lengths))} / max {max(lengths)}")
    present = {m: sum(int(t.present[m]) for t in ds.trajectories) for m in ("g", "I", "p", "a", "R")}
    print(f"modality presence counts: {present}")
    print(f"metadata: {json.dumps(ds.metadata, sort_keys=True)}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plex", description="planner-executor imitation learning, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the three dataset categories")
    _add_common(p)
    p.add_argument("--full-ttd", action="store_true", help="keep actions/proprio in the target demos")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run both pretraining stages and evaluate")
    _add_common(p)
    p.add_argument("--data", help="directory with mtvd.plxd/vmt.plxd (generated when omitted)")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune a pretrained checkpoint on target demos")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory with ttd.plxd")
    p.add_argument("--scope", choices=FINETUNE_SCOPES, default="planner_last_layer")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="closed-loop success rates for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--conditioning", choices=("planner", "goal_embedding"), default="planner")
    p.add_argument("--full-eval", action="store_true", help="50 episodes per task (reference protocol)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a named experiment end to end")
    _add_common(p)
    p.add_argument("--name", choices=EXPERIMENT_NAMES, required=True)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all losses")
    _add_common(p)
    p.add_argument("--sample", type=int, default=40, help="coordinates checked per parameter tensor")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect-dataset", help="print a dataset file's manifest summary")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect_dataset)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except PlexError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: generate, train, eval, export-trajectory,
param-count, bench-overhead.

Every command is deterministic given (config, seed, input files). Exit
codes: 0 ok, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .config import (
    RunContext,
    build_model,
    canonicalize,
    load_config,
    synthetic_spec_from_cfg,
)
from .data import (
    IrregularSeries,
    generate_synthetic,
    load_csv_with_heldout,
    write_csv,
)
from .errors import ConfigError, SampleNotFoundError, TempoOdeError
from .models import decode, encode, param_count
from .training import AdamaxState, Trainer, fit, primary_metric


def worker_count() -> int:
    """Parallel helper cap: min(cpu count, TEMPO_ODE_THREADS if set)."""
    cpus = os.cpu_count() or 1
    env = os.environ.get("TEMPO_ODE_THREADS", "").strip()
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"TEMPO_ODE_THREADS must be an integer, got {env!r}")
        if cap >= 1:
            return min(cpus, cap)
    return cpus


def _record_json(record) -> dict:
    return {
        "epoch": record.epoch,
        "train_loss": record.train_loss,
        "val": record.val_metrics,
        "lr": record.lr,
        "seconds": record.seconds,
    }


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["training"]["seed"] = args.seed
    if cfg["data"]["synthetic"] is None:
        raise ConfigError("generate needs a data.synthetic section")
    spec = synthetic_spec_from_cfg(cfg["data"], cfg["training"]["seed"])
    series = generate_synthetic(spec)
    out = args.out
    write_csv(series, out + ".csv", use_mask="mask")
    write_csv(series, out + ".heldout.csv", use_mask="heldout")
    observed = int(sum(s.mask.sum() for s in series))
    heldout = int(sum(s.heldout_mask.sum() for s in series))
    stats = {
        "n_samples": len(series),
        "t_grid": spec.t_grid,
        "observed_per_sample": observed // len(series),
        "observed_cells": observed,
        "heldout_cells": heldout,
        "realized_sparsity": observed / (observed + heldout),
        "seed": spec.seed,
    }
    with open(out + ".stats.json", "w") as fh:
        json.dump(stats, fh, sort_keys=True, indent=1)
    print(json.dumps(stats, sort_keys=True))
    return 0


def run_training(cfg: dict, out_dir: Optional[str] = None,
                 resume_path: Optional[str] = None) -> dict:
    """Train per config; write checkpoints and a JSONL metrics log.

    Returns a summary dict (best epoch/metric, paths, history length).
    Shared by the train command and the overhead benchmark.
    """
    ctx = RunContext(cfg)
    tr = cfg["training"]
    opt = AdamaxState(ctx.model.parameters(), lr=tr["lr"], decay=tr["decay"])
    start_epoch = 0
    if resume_path:
        payload = ckpt.load_checkpoint(resume_path)
        ckpt.apply_params(ctx.model, payload)
        restored = ckpt.restore_optimizer(payload, ctx.model)
        if restored is not None:
            opt = restored
        start_epoch = payload["epoch"] + 1

    trainer = Trainer(ctx.model, ctx.split, ctx.loss_spec, opt, ctx.settings,
                      ctx.solver_train, ctx.solver_eval)

    log_lines: list[dict] = []

    def on_record(record):
        log_lines.append(_record_json(record))

    if tr["epochs"] > start_epoch:
        result = fit(trainer, tr["epochs"], tr["patience"],
                     start_epoch=start_epoch, on_record=on_record)
    else:
        # nothing to train: log one gradient-free validation pass
        val = trainer.validate()
        name, value, _ = primary_metric(ctx.settings.task, val)
        from .training import FitResult, snapshot_params

        log_lines.append({"epoch": start_epoch - 1 if start_epoch else 0,
                          "train_loss": None, "val": val,
                          "lr": opt.lr_at(max(start_epoch - 1, 0)), "seconds": 0.0})
        result = FitResult(history=[], best_epoch=max(start_epoch - 1, 0),
                           best_metric_name=name, best_metric=value,
                           best_params=snapshot_params(ctx.model))

    summary = {
        "best_epoch": result.best_epoch,
        "best_metric_name": result.best_metric_name,
        "best_metric": result.best_metric,
        "epochs_run": len(result.history),
        "history": log_lines,
    }

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
            for line in log_lines:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
        final_epoch = result.history[-1].epoch if result.history else max(start_epoch - 1, 0)
        final_payload = ckpt.checkpoint_payload(
            ctx.model, ctx.cfg_echo, final_epoch, opt=opt,
            norm_mean=ctx.split.norm_mean, norm_std=ctx.split.norm_std,
            best_metric=result.best_metric)
        ckpt.save_checkpoint(os.path.join(out_dir, "final.json"), final_payload)
        from .training import restore_params

        restore_params(ctx.model, result.best_params)
        best_payload = ckpt.checkpoint_payload(
            ctx.model, ctx.cfg_echo, result.best_epoch, opt=None,
            norm_mean=ctx.split.norm_mean, norm_std=ctx.split.norm_std,
            best_metric=result.best_metric)
        ckpt.save_checkpoint(os.path.join(out_dir, "best.json"), best_payload)
        summary["best_checkpoint"] = os.path.join(out_dir, "best.json")
        summary["final_checkpoint"] = os.path.join(out_dir, "final.json")
    return summary


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["training"]["seed"] = args.seed
    summary = run_training(cfg, out_dir=args.out, resume_path=args.checkpoint)
    printable = {k: v for k, v in summary.items() if k != "history"}
    print(json.dumps(printable, sort_keys=True))
    return 0


def _rebuild_from_checkpoint(path: str, data_path: Optional[str] = None):
    """(model, series list for eval, cfg, norm stats) from a checkpoint."""
    payload = ckpt.load_checkpoint(path)
    cfg = canonicalize(payload["config"])
    feature_dim = cfg["model"]["feature_dim"]
    if feature_dim is None:
        raise ConfigError("checkpoint config does not record feature_dim")
    model = build_model(cfg["model"], feature_dim, cfg["training"]["seed"],
                        n_classes=cfg["model"]["n_classes"])
    ckpt.apply_params(model, payload)
    mean, std = ckpt.norm_stats(payload)
    if data_path is not None:
        series = load_csv_with_heldout(data_path)
        if series and series[0].n_features != feature_dim:
            raise ConfigError(
                f"data has {series[0].n_features} features, checkpoint expects {feature_dim}")
        if mean is not None:
            for s in series:
                touched = (s.mask > 0) | (s.heldout_mask > 0)
                s.values = np.where(touched, (s.values - mean) / std, 0.0)
        split = None
    else:
        ctx = RunContext(cfg)
        split = ctx.split
        mean, std = split.norm_mean, split.norm_std
        series = split.test
    return model, series, split, cfg, mean, std


def cmd_eval(args) -> int:
    from .training import evaluate

    model, series, split, cfg, mean, std = _rebuild_from_checkpoint(
        args.checkpoint, args.data)
    if split is not None and args.split != "test":
        series = {"train": split.train, "validation": split.validation,
                  "test": split.test,
                  "all": split.all_series()}[args.split]
    task = args.task or cfg["task"]["kind"]
    span = max(float(s.times[-1]) for s in series) - min(float(s.times[0]) for s in series)
    t_lo = min(float(s.times[0]) for s in series)
    cut = None
    if task == "extrapolation":
        cut = t_lo + cfg["task"]["extrapolation_cut"] * span
    from .config import solver_configs

    _, solver_eval = solver_configs(cfg, span if span > 0 else 1.0)
    metrics = evaluate(model, series, task, solver_eval, norm_mean=mean,
                       norm_std=std, classifier_input=cfg["task"]["classifier_input"],
                       extrapolation_cut=cut, per_sample=args.per_sample)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _parse_times_spec(spec: str, series: IrregularSeries) -> np.ndarray:
    if spec == "obs":
        return series.times[series.mask.any(axis=1)]
    try:
        n = int(spec)
    except ValueError:
        raise ConfigError(f"--times must be an integer count or 'obs', got {spec!r}")
    if n < 2:
        raise ConfigError("--times count must be at least 2")
    return np.linspace(series.times[0], series.times[-1], n)


def cmd_export_trajectory(args) -> int:
    model, series, split, cfg, mean, std = _rebuild_from_checkpoint(
        args.checkpoint, args.data)
    pool = series if split is None else split.all_series()
    target = None
    for s in pool:
        if s.sample_id == args.sample:
            target = s
            break
    if target is None:
        try:
            target = pool[int(args.sample)]
        except (ValueError, IndexError):
            raise SampleNotFoundError(f"sample {args.sample!r} not found")

    times = _parse_times_spec(args.times, target)
    span = float(target.times[-1] - target.times[0])
    from .config import solver_configs

    _, solver_eval = solver_configs(cfg, span if span > 0 else 1.0)
    mu, _ = encode(model, target.times, target.values * target.mask,
                   target.mask, solver_eval, t0=float(target.times[0]))
    dec_times = times if times[0] == target.times[0] \
        else np.concatenate([[target.times[0]], times])
    preds = decode(model, mu, dec_times, solver_eval)
    pred = np.stack([p.data[0] for p in preds])
    if dec_times.size != times.size:
        pred = pred[1:]
    if mean is not None:
        pred = pred * std + mean

    d = target.n_features
    obs_lookup = {float(t): i for i, t in enumerate(target.times)}
    import csv as _csv

    with open(args.out, "w", newline="") as fh:
        w = _csv.writer(fh)
        header = ["time"]
        for j in range(d):
            header += [f"f{j + 1}_obs", f"f{j + 1}_mask", f"f{j + 1}_heldout", f"f{j + 1}_pred"]
        w.writerow(header)
        for row_i, t in enumerate(times):
            row = [repr(float(t))]
            idx = obs_lookup.get(float(t))
            for j in range(d):
                if idx is not None and (target.mask[idx, j] > 0 or target.heldout_mask[idx, j] > 0):
                    v = target.values[idx, j]
                    if mean is not None:
                        v = v * std[j] + mean[j]
                    row += [repr(float(v)), int(target.mask[idx, j]),
                            int(target.heldout_mask[idx, j]), repr(float(pred[row_i, j]))]
                else:
                    row += ["", 0, 0, repr(float(pred[row_i, j]))]
            w.writerow(row)
    print(json.dumps({"rows": len(times), "out": args.out}))
    return 0


def cmd_param_count(args) -> int:
    cfg = load_config(args.config)
    feature_dim = cfg["model"]["feature_dim"]
    if feature_dim is None:
        if cfg["data"]["synthetic"] is not None:
            feature_dim = 1
        else:
            ctx = RunContext(cfg)
            feature_dim = ctx.split.all_series()[0].n_features
    reports = {}
    for section in ("model", "compare_model"):
        block = cfg.get(section)
        if block is None:
            continue
        model = build_model(block, feature_dim, cfg["training"]["seed"],
                            n_classes=block["n_classes"])
        total, breakdown = param_count(model)
        reports[section] = (total, breakdown)
        print(f"[{section}] temporal={block['temporal']}")
        for comp in sorted(breakdown):
            print(f"  {comp:<28} {breakdown[comp]:>10}")
        print(f"  {'total':<28} {total:>10}")
    if len(reports) == 2:
        m = reports["model"][0]
        c = reports["compare_model"][0]
        print(f"ratio (compare_model/model): {c / m:.4f}")
    return 0


def cmd_bench_overhead(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["training"]["seed"] = args.seed
    epochs = args.epochs
    variants = {}
    if cfg["model"]["temporal"]:
        variants["temporal"] = cfg
    else:
        variants["static"] = cfg
    other = copy.deepcopy(cfg)
    if cfg.get("compare_model") is not None:
        other["model"] = copy.deepcopy(cfg["compare_model"])
        other["compare_model"] = None
    else:
        other["model"]["temporal"] = not cfg["model"]["temporal"]
    variants["temporal" if other["model"]["temporal"] else "static"] = other
    if len(variants) != 2:
        raise ConfigError("bench-overhead needs one temporal and one static model")

    report = {}
    for name, variant in variants.items():
        run_cfg = copy.deepcopy(variant)
        run_cfg["training"]["epochs"] = epochs
        run_cfg["training"]["patience"] = epochs + 1
        summary = run_training(run_cfg, out_dir=None)
        secs = [line["seconds"] for line in summary["history"]
                if line.get("seconds") is not None]
        report[f"{name}_epoch_seconds"] = secs
        report[f"{name}_seconds_per_epoch"] = float(np.median(secs))
    report["ratio"] = (report["temporal_seconds_per_epoch"]
                       / report["static_seconds_per_epoch"])
    print(json.dumps(report, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempo-ode",
        description="Train and evaluate continuous-time models whose weights "
                    "are rebuilt from time by a synchronization scaling rule.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="CSV dataset; defaults to the config's data")
    p.add_argument("--task")
    p.add_argument("--split", default="test",
                   choices=("train", "validation", "test", "all"))
    p.add_argument("--per-sample", action="store_true", dest="per_sample")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-trajectory", help="decode a trajectory to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--sample", required=True, help="sample id or index")
    p.add_argument("--times", default="200", help="count of uniform times, or 'obs'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_trajectory)

    p = sub.add_parser("param-count", help="parameter count breakdown")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("bench-overhead", help="epoch-time ratio of paired models")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench_overhead)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TempoOdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

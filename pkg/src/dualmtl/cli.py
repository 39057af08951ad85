"""Command-line interface.

Commands: simulate, train, eval, hpsearch, sweep, export-latents. Every
command is deterministic given its inputs and --seed, writes through
atomic renames, and validates configuration before any compute starts.

Environment overrides (CI convenience): DUALMTL_SEED and DUALMTL_JOBS
provide defaults for --seed and --jobs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio
from .dgp import DEFAULTS, DgpConfig, GeneratedStudy, SETTING_IDS, TaskDataset, TaskSplits, generate, make_setting
from .errors import DivergenceError, InputError, SchemaError, ShapeError
from .figures import plot_rmse_comparison, plot_training_curves
from .harness import (
    DESK_FRESH_BETA,
    DESK_HP,
    DESK_LR_DECAY,
    DESK_PATIENCE,
    FULL_SCALE_EPOCHS,
    FULL_SCALE_REPLICATIONS,
    FULL_SCALE_TRIALS,
    HyperParams,
    export_latents,
    relative_center_distances,
    rmse,
    run_hpsearch,
    run_replications,
)
from .model import PenaltyWeights, predict
from .nncore import LrSchedule
from .persist import load_model, save_model
from .trainer import TrainConfig, build_model, train

CONFIG_SCHEMA_VERSION = 1
DESK_HPSEARCH_TRIALS = 8
DESK_HPSEARCH_EPOCHS = 300

_TRAIN_OPTION_DEFAULTS = {
    "patience": DESK_PATIENCE,
    "lr_decay": DESK_LR_DECAY,
    "inner_steps": 1,
    "fresh_beta_in_alpha": DESK_FRESH_BETA,
    "encoder_lr_scale": 1.0,
}


def _env_int(name: str, fallback: int) -> int:
    raw = os.environ.get(name)
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise SchemaError(f"environment variable {name}={raw!r} is not an integer") from None


def _reject_unknown(payload: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise SchemaError(f"{where}: unknown keys {unknown}; allowed: {sorted(allowed)}")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"{p}: config file not found")
    with open(p, encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise SchemaError(f"{p}: config must be a JSON object")
    if payload.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise SchemaError(
            f"{p}: schema_version {payload.get('schema_version')!r} unsupported "
            f"(expected {CONFIG_SCHEMA_VERSION})"
        )
    return payload


def _validated_hp(overrides: dict, where: str) -> HyperParams:
    base = DESK_HP.as_dict()
    _reject_unknown(overrides, set(base), where)
    base.update(overrides)
    hp = HyperParams(**base)
    checks = [
        (hp.depth_s >= 1, "depth_s must be >= 1"),
        (hp.width_s >= 1, "width_s must be >= 1"),
        (hp.q >= 1, "q must be >= 1"),
        (hp.depth_c >= 1, "depth_c must be >= 1"),
        (hp.width_c >= 1, "width_c must be >= 1"),
        (hp.p >= 1, "p must be >= 1"),
        (hp.lambda_s >= 0, "lambda_s must be >= 0"),
        (hp.lambda_c >= 0, "lambda_c must be >= 0"),
        (hp.lambda_o >= 0, "lambda_o must be >= 0"),
        (hp.batch_size >= 1, "batch_size must be >= 1"),
        (hp.learning_rate > 0, "learning_rate must be > 0"),
        (hp.epochs >= 1, "epochs must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise SchemaError(f"{where}: {msg}")
    return hp


def _validated_train_options(overrides: dict, where: str) -> dict:
    opts = dict(_TRAIN_OPTION_DEFAULTS)
    _reject_unknown(overrides, set(opts), where)
    opts.update(overrides)
    if opts["patience"] < 0:
        raise SchemaError(f"{where}: patience must be >= 0")
    if not (0.0 < opts["lr_decay"] <= 1.0):
        raise SchemaError(f"{where}: lr_decay must be in (0, 1]")
    if opts["inner_steps"] < 1:
        raise SchemaError(f"{where}: inner_steps must be >= 1")
    if opts["encoder_lr_scale"] < 0:
        raise SchemaError(f"{where}: encoder_lr_scale must be >= 0")
    if not isinstance(opts["fresh_beta_in_alpha"], bool):
        raise SchemaError(f"{where}: fresh_beta_in_alpha must be a boolean")
    return opts


# ---------------------------------------------------------------------------
# dataset directory handling


def _dataset_manifest(study: GeneratedStudy, setting: str | None) -> dict:
    cfg = study.config
    return {
        "kind": "dataset",
        "setting": setting,
        "seed": cfg.seed,
        "config": {
            "n_tasks": cfg.n_tasks,
            "n_r": list(cfg.n_r),
            "d": cfg.d,
            "d_c": cfg.d_c,
            "sigma_e": cfg.sigma_e,
            "sigma_c": cfg.sigma_c,
            "sigma_r": list(cfg.sigma_r),
            "linear": cfg.linear,
        },
        "tasks": [
            {
                "id": r + 1,
                "train": f"task_{r + 1}_train.csv",
                "val": f"task_{r + 1}_val.csv",
                "test": f"task_{r + 1}_test.csv",
            }
            for r in range(cfg.n_tasks)
        ],
    }


def write_dataset_dir(study: GeneratedStudy, out_dir: Path, setting: str | None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for r, task in enumerate(study.tasks):
        for role in ("train", "val", "test"):
            ds = getattr(task, role)
            dataio.write_task_csv(out_dir / f"task_{r + 1}_{role}.csv", ds.X, ds.y)
    return dataio.write_manifest(out_dir, _dataset_manifest(study, setting))


def load_dataset_dir(data_dir: Path):
    """Read a simulate-produced directory back into task splits."""
    data_dir = Path(data_dir)
    manifest = dataio.read_manifest(data_dir)
    tasks = []
    for entry in manifest["tasks"]:
        splits = {}
        for role in ("train", "val", "test"):
            X, y = dataio.read_task_csv(data_dir / entry[role])
            splits[role] = TaskDataset(X, y, role, entry["id"] - 1)
        if splits["train"].X.shape[1] != splits["val"].X.shape[1] != splits["test"].X.shape[1]:
            raise SchemaError(f"task {entry['id']}: splits disagree on feature count")
        tasks.append(TaskSplits(splits["train"], splits["val"], splits["test"]))
    d = tasks[0].train.X.shape[1]
    for entry, task in zip(manifest["tasks"], tasks):
        if task.train.X.shape[1] != d:
            raise SchemaError(f"task {entry['id']}: feature count differs from task 1")
    return tasks, manifest


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    if args.config:
        payload = _load_config_file(args.config)
        allowed = {
            "schema_version",
            "n_tasks",
            "n_r",
            "d",
            "d_c",
            "sigma_e",
            "sigma_c",
            "sigma_r",
            "linear",
        }
        _reject_unknown(payload, allowed, args.config)
        body = {k: v for k, v in payload.items() if k != "schema_version"}
        cfg = DgpConfig(seed=args.seed, **body)
        setting = None
    elif args.setting:
        overrides = {}
        if args.dc is not None:
            overrides["d_c"] = args.dc
        if args.n is not None:
            overrides["n_r"] = args.n
        if args.sigma_bar is not None:
            overrides["sigma_bar"] = args.sigma_bar
        cfg = make_setting(args.setting, seed=args.seed, **overrides)
        setting = args.setting
    else:
        raise SchemaError("simulate needs --setting or --config")
    study = generate(cfg)
    manifest_path = write_dataset_dir(study, args.out, setting)
    print(f"wrote {cfg.n_tasks} tasks x 3 splits to {args.out} ({manifest_path.name})")
    return 0


def _resolve_training(args):
    payload = _load_config_file(args.config)
    _reject_unknown(
        payload, {"schema_version", "seed", "hyperparams", "train"}, args.config or "config"
    )
    hp = _validated_hp(payload.get("hyperparams", {}), "hyperparams")
    opts = _validated_train_options(payload.get("train", {}), "train")
    seed = args.seed if args.seed is not None else payload.get("seed", _env_int("DUALMTL_SEED", 0))
    if not isinstance(seed, int) or seed < 0:
        raise SchemaError(f"seed must be a non-negative integer, got {seed!r}")
    epochs = hp.epochs
    if getattr(args, "full_scale", False):
        epochs = FULL_SCALE_EPOCHS
    if getattr(args, "epochs", None) is not None:
        epochs = args.epochs
    return hp, opts, seed, epochs


def cmd_train(args) -> int:
    hp, opts, seed, epochs = _resolve_training(args)
    tasks, _ = load_dataset_dir(args.data)
    d = tasks[0].train.X.shape[1]
    n_tasks = len(tasks)
    model = build_model(
        d,
        n_tasks,
        depth_s=hp.depth_s,
        width_s=hp.width_s,
        q=hp.q,
        depth_c=hp.depth_c,
        width_c=hp.width_c,
        p=hp.p,
        seed=seed,
    )
    config = TrainConfig(
        epochs=epochs,
        batch_sizes=hp.batch_size,
        schedule=LrSchedule(hp.learning_rate, opts["lr_decay"]),
        weights=PenaltyWeights.uniform(n_tasks, hp.lambda_s, hp.lambda_c, hp.lambda_o),
        patience=opts["patience"],
        inner_steps=opts["inner_steps"],
        seed=seed,
        encoder_lr_scale=opts["encoder_lr_scale"],
        fresh_beta_in_alpha=opts["fresh_beta_in_alpha"],
    )
    t0 = time.perf_counter()
    trained, report = train(model, tasks, config)
    elapsed = time.perf_counter() - t0

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(trained, out_dir / "model.bin")
    dataio.write_csv(
        out_dir / "train_report.csv",
        ["epoch", "total", "mse", "similarity", "orthogonality", "val_mse", "lr"],
        (
            [e]
            + [report.history[k][e] for k in ("total", "mse", "similarity", "orthogonality")]
            + [report.history["val_mse"][e], report.history["lr"][e]]
            for e in range(report.epochs_run)
        ),
    )
    rel = relative_center_distances(trained)
    summary = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "seed": seed,
        "hyperparams": hp.as_dict(),
        "train_options": opts,
        "epochs_requested": epochs,
        "epochs_run": report.epochs_run,
        "best_epoch": report.best_epoch,
        "best_val_mse": report.best_val_mse,
        "alpha_center_dist": report.alpha_center_dist,
        "beta_center_dist": report.beta_center_dist,
        "cross_gram_fro": report.cross_gram_fro,
        "max_param_norm": report.max_param_norm,
        "ridge_jitter_used": report.ridge_jitter_used,
        "relative_center_distances": [
            {"task": r + 1, "alpha": rel[r][0], "beta": rel[r][1]} for r in range(n_tasks)
        ],
    }
    dataio.atomic_write_text(
        out_dir / "train_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    plot_training_curves(report, out_dir / "training_curves.png")
    # timing stays on the console so artifacts are byte-stable across runs
    print(
        f"trained {report.epochs_run} epochs in {elapsed:.1f}s; "
        f"best epoch {report.best_epoch} (val mse {report.best_val_mse:.6g}); wrote {out_dir}"
    )
    return 0


def _parse_splits(raw: str) -> list[str]:
    splits = [s.strip() for s in raw.split(",") if s.strip()]
    bad = [s for s in splits if s not in ("train", "val", "test")]
    if bad or not splits:
        raise SchemaError(f"--splits must name train/val/test, got {raw!r}")
    return splits


def cmd_eval(args) -> int:
    splits = _parse_splits(args.splits)
    model = load_model(args.model)
    tasks, _ = load_dataset_dir(args.data)
    if len(tasks) != model.n_tasks:
        raise ShapeError(f"model has {model.n_tasks} tasks but dataset has {len(tasks)}")
    rows = []
    for r, task in enumerate(tasks):
        for split in splits:
            ds = getattr(task, split)
            rows.append([r + 1, split, rmse(predict(model, r, ds.X), ds.y)])
    out_path = Path(args.out)
    dataio.write_csv(out_path, ["task", "split", "rmse"], rows)
    for task_id, split, value in rows:
        print(f"task {task_id} {split}: rmse {value:.6g}")
    print(f"wrote {out_path}")
    return 0


def _hp_field_names() -> list[str]:
    return [f.name for f in dataclasses.fields(HyperParams)]


def cmd_hpsearch(args) -> int:
    tasks, _ = load_dataset_dir(args.data)
    seed = args.seed if args.seed is not None else _env_int("DUALMTL_SEED", 0)
    trials = args.trials
    epochs = args.epochs
    if args.full_scale:
        trials = trials if args.trials_given else FULL_SCALE_TRIALS
        epochs = None  # let each trial use its sampled (full-scale) epoch count
    rng = np.random.default_rng([seed, 50])
    best, results = run_hpsearch(
        tasks,
        trials,
        rng,
        seed=seed,
        epochs=epochs,
        jobs=args.jobs,
        mode="grid" if args.grid else "random",
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = _hp_field_names()
    dataio.write_csv(
        out_dir / "trials.csv",
        ["trial"] + names + ["val_mse", "error"],
        (
            [t.trial]
            + [getattr(t.hp, n) for n in names]
            + [t.val_mse if t.val_mse is not None else "", t.error or ""]
            for t in results
        ),
    )
    best_trial = min(
        (t for t in results if t.val_mse is not None),
        key=lambda t: (t.val_mse, t.trial),
    )
    payload = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "best_trial": best_trial.trial,
        "val_mse": best_trial.val_mse,
        "hyperparams": best.as_dict(),
    }
    dataio.atomic_write_text(
        out_dir / "best.json", json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )
    print(f"best trial {best_trial.trial}: val mse {best_trial.val_mse:.6g}; wrote {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    seed = args.seed if args.seed is not None else _env_int("DUALMTL_SEED", 0)
    n_seeds = args.seeds
    epochs = None
    if args.full_scale:
        n_seeds = n_seeds if args.seeds_given else FULL_SCALE_REPLICATIONS
        epochs = FULL_SCALE_EPOCHS
    if args.epochs is not None:
        epochs = args.epochs
    overrides = {}
    if args.dc is not None:
        overrides["d_c"] = args.dc
    if args.n is not None:
        overrides["n_r"] = args.n
    if args.sigma_bar is not None:
        overrides["sigma_bar"] = args.sigma_bar
    seeds = [seed + i for i in range(n_seeds)]
    result = run_replications(
        args.setting, seeds, overrides=overrides, epochs=epochs, jobs=args.jobs
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataio.write_csv(
        out_dir / "metrics.csv",
        ["setting", "seed", "task", "method", "split", "rmse"],
        ([r.setting, r.seed, r.task, r.method, r.split, r.rmse] for r in result.rows),
    )
    dataio.write_csv(
        out_dir / "aggregate.csv",
        ["setting", "task", "method", "mean_rmse", "sd_rmse", "n_seeds"],
        (
            [a.setting, a.task, a.method, a.mean_rmse, a.sd_rmse, a.n_seeds]
            for a in result.aggregates
        ),
    )
    if result.failures:
        dataio.write_csv(
            out_dir / "failures.csv", ["seed", "error"], ([s, m] for s, m in result.failures)
        )
    if result.aggregates:
        plot_rmse_comparison(result.aggregates, out_dir / "rmse_comparison.png")
    for agg in result.aggregates:
        print(
            f"setting {agg.setting} task {agg.task} {agg.method}: "
            f"{agg.mean_rmse:.4f} ({agg.sd_rmse:.4f}) over {agg.n_seeds} seeds"
        )
    if result.failures:
        print(f"{len(result.failures)} seed(s) failed; see failures.csv", file=sys.stderr)
        if not args.allow_partial:
            return 1
    print(f"wrote {out_dir}")
    return 0


def cmd_export_latents(args) -> int:
    model = load_model(args.model)
    tasks, _ = load_dataset_dir(args.data)
    if len(tasks) != model.n_tasks:
        raise ShapeError(f"model has {model.n_tasks} tasks but dataset has {len(tasks)}")
    if args.split not in ("train", "val", "test"):
        raise SchemaError(f"--split must be train/val/test, got {args.split!r}")
    paths = export_latents(model, tasks, args.out, split=args.split)
    print(f"wrote {len(paths)} latent files to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualmtl",
        description="Dual-encoder multi-task regression: simulate, train, evaluate, sweep.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic study as CSV files")
    sim.add_argument("--setting", choices=SETTING_IDS, help="named study configuration")
    sim.add_argument("--config", help="JSON file with an explicit generator configuration")
    sim.add_argument("--dc", type=int, help=f"shared latent columns (default {DEFAULTS['d_c']})")
    sim.add_argument("--n", type=int, help="per-task sample count per split")
    sim.add_argument("--sigma-bar", type=float, dest="sigma_bar", help="task coefficient std")
    sim.add_argument("--seed", type=int, default=_env_int("DUALMTL_SEED", 0))
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("train", help="train the multi-task model on a dataset directory")
    tr.add_argument("--data", required=True, help="directory produced by simulate")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--config", help="JSON config (hyperparams/train sections)")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--epochs", type=int, default=None, help="override the epoch budget")
    tr.add_argument("--full-scale", action="store_true", dest="full_scale")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a saved model")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--splits", default="test", help="comma-separated: train,val,test")
    ev.add_argument("--out", default="metrics.csv")
    ev.set_defaults(func=cmd_eval)

    hs = sub.add_parser("hpsearch", help="random hyperparameter search")
    hs.add_argument("--data", required=True)
    hs.add_argument("--trials", type=int, default=DESK_HPSEARCH_TRIALS)
    hs.add_argument("--seed", type=int, default=None)
    hs.add_argument("--epochs", type=int, default=DESK_HPSEARCH_EPOCHS)
    hs.add_argument("--jobs", type=int, default=_env_int("DUALMTL_JOBS", 1))
    hs.add_argument("--out", required=True)
    hs.add_argument(
        "--grid",
        action="store_true",
        help="walk the exhaustive grid (prefix of --trials settings) instead of sampling",
    )
    hs.add_argument("--full-scale", action="store_true", dest="full_scale")
    hs.set_defaults(func=cmd_hpsearch)

    sw = sub.add_parser("sweep", help="replicated generate/fit/score comparison")
    sw.add_argument("--setting", required=True, choices=SETTING_IDS)
    sw.add_argument("--seeds", type=int, default=3, help="number of replication seeds")
    sw.add_argument("--seed", type=int, default=None, help="base seed (seeds are seed..seed+n-1)")
    sw.add_argument("--jobs", type=int, default=_env_int("DUALMTL_JOBS", 1))
    sw.add_argument("--dc", type=int, default=None)
    sw.add_argument("--n", type=int, default=None)
    sw.add_argument("--sigma-bar", type=float, dest="sigma_bar", default=None)
    sw.add_argument("--epochs", type=int, default=None)
    sw.add_argument("--allow-partial", action="store_true", dest="allow_partial")
    sw.add_argument("--full-scale", action="store_true", dest="full_scale")
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=cmd_sweep)

    ex = sub.add_parser("export-latents", help="write encoder outputs as CSVs")
    ex.add_argument("--model", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--split", default="train")
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_export_latents)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # record whether count-like flags were given explicitly (full-scale defaults)
    raw = argv if argv is not None else sys.argv[1:]
    args.trials_given = "--trials" in raw
    args.seeds_given = "--seeds" in raw
    try:
        return args.func(args)
    except (SchemaError, ShapeError, InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())

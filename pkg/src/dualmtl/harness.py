"""Experiment orchestration: RMSE evaluation, the single-task baseline,
random hyperparameter search, and seeded replication sweeps.

Seeds and trials are embarrassingly parallel; every worker derives its
own RNG streams from (base seed, index) tuples, so results are identical
whether a sweep runs serially or in a process pool. Rows are sorted
before aggregation to keep outputs scheduling-independent.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataio import write_csv
from .dgp import TaskSplits, generate, make_setting
from .errors import ShapeError
from .model import MtlModel, PenaltyWeights, latents, predict
from .nncore import LrSchedule
from .trainer import TrainConfig, build_model, train

# Search space for random hyperparameter sampling; one value of each
# field per trial, drawn uniformly and independently.
TABLE_GRIDS: dict[str, tuple] = {
    "depth_s": (3, 4, 5),
    "width_s": (16, 32, 64, 128),
    "q": (8, 16, 32, 64),
    "depth_c": (3, 4, 5),
    "width_c": (16, 32, 64, 128),
    "p": (8, 16, 32, 64),
    "lambda_s": (0.0001, 0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 500.0, 1000.0, 5000.0),
    "lambda_c": (0.0001, 0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 500.0, 1000.0, 5000.0),
    "lambda_o": (0.001, 0.01),
    "batch_size": (8, 16, 32),
    "learning_rate": (0.0001, 0.001),
    "epochs": (25000,),
}

FULL_SCALE_EPOCHS = 25000
FULL_SCALE_TRIALS = 50
FULL_SCALE_REPLICATIONS = 100

# rng stream tags for seeds derived from a replication seed
_STREAM_MTL_INIT = 20
_STREAM_MTL_TRAIN = 21
_STREAM_STL = 22
_STREAM_TRIAL = 30


@dataclass(frozen=True)
class HyperParams:
    """One point of the search space (one lambda shared by all tasks)."""

    depth_s: int
    width_s: int
    q: int
    depth_c: int
    width_c: int
    p: int
    lambda_s: float
    lambda_c: float
    lambda_o: float
    batch_size: int
    learning_rate: float
    epochs: int

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# Published desk-scale configuration: trains in seconds per run yet beats
# the single-task baseline on the bundled synthetic settings. Batches are
# effectively full-data (200 rows caps at each task's training size), which
# keeps the exact center solves well conditioned; the cross-Gram weight is
# zero here because that term is unnormalized and grows with the square of
# the batch rows, so grid values sized for tiny batches would swamp the fit
# term at this batch size. Full-scale values are one flag away.
DESK_HP = HyperParams(
    depth_s=3,
    width_s=64,
    q=16,
    depth_c=3,
    width_c=64,
    p=16,
    lambda_s=1.0,
    lambda_c=1.0,
    lambda_o=0.0,
    batch_size=200,
    learning_rate=0.006,
    epochs=2000,
)
DESK_PATIENCE = 200
# Desk runs decay the rate much more slowly than the search-protocol 0.95
# (one full-batch step per epoch leaves 0.95 no room to learn) and use the
# fresh-value ordering in the alpha step: the as-displayed stale ordering
# lets the two head blocks double-fit the same residual, which oscillates
# and can diverge.
DESK_LR_DECAY = 0.9995
DESK_FRESH_BETA = True


def rmse(yhat: np.ndarray, y: np.ndarray) -> float:
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ShapeError(f"prediction shape {yhat.shape} != target shape {y.shape}")
    if yhat.size == 0:
        raise ValueError("rmse of empty input is undefined")
    return float(np.sqrt(np.mean(np.square(yhat - y))))


def sample_hyperparams(rng: np.random.Generator) -> HyperParams:
    """Uniform draw from every grid, in declared field order."""
    drawn = {name: grid[int(rng.integers(len(grid)))] for name, grid in TABLE_GRIDS.items()}
    return HyperParams(**drawn)


def grid_hyperparams():
    """Exhaustive grid enumeration in row-major declared-field order.

    The full product is several million settings, so exhaustive mode is
    only practical with a trial cap (a prefix of this ordering) or a
    reduced grid; random sampling is the default search strategy.
    """
    names = list(TABLE_GRIDS)
    for combo in itertools.product(*(TABLE_GRIDS[n] for n in names)):
        yield HyperParams(**dict(zip(names, combo)))


def train_config_for(
    hp: HyperParams,
    n_tasks: int,
    *,
    seed,
    patience: int = DESK_PATIENCE,
    epochs: int | None = None,
    lr_decay: float = DESK_LR_DECAY,
    inner_steps: int = 1,
    fresh_beta_in_alpha: bool = DESK_FRESH_BETA,
    penalties: bool = True,
) -> TrainConfig:
    if penalties:
        weights = PenaltyWeights.uniform(n_tasks, hp.lambda_s, hp.lambda_c, hp.lambda_o)
    else:
        weights = PenaltyWeights.uniform(n_tasks, 0.0, 0.0, 0.0)
    return TrainConfig(
        epochs=epochs if epochs is not None else hp.epochs,
        batch_sizes=hp.batch_size,
        schedule=LrSchedule(hp.learning_rate, lr_decay),
        weights=weights,
        patience=patience,
        inner_steps=inner_steps,
        seed=seed,
        fresh_beta_in_alpha=fresh_beta_in_alpha,
    )


def fit_mtl(
    tasks: list[TaskSplits],
    hp: HyperParams,
    *,
    seed,
    patience: int = DESK_PATIENCE,
    epochs: int | None = None,
):
    """Build and train the dual-encoder model on a list of task splits."""
    d = tasks[0].train.X.shape[1]
    model = build_model(
        d,
        len(tasks),
        depth_s=hp.depth_s,
        width_s=hp.width_s,
        q=hp.q,
        depth_c=hp.depth_c,
        width_c=hp.width_c,
        p=hp.p,
        seed=seed,
    )
    config = train_config_for(hp, len(tasks), seed=seed, patience=patience, epochs=epochs)
    return train(model, tasks, config)


def train_stl_baseline(
    dataset: TaskSplits,
    hp: HyperParams,
    *,
    seed=0,
    patience: int = DESK_PATIENCE,
    epochs: int | None = None,
):
    """Independent single-task fit: one specific encoder, no shared path,
    all shrinkage penalties zero. Returns (model, report, test_rmse)."""
    d = dataset.train.X.shape[1]
    model = build_model(
        d,
        1,
        depth_s=hp.depth_s,
        width_s=hp.width_s,
        q=hp.q,
        with_shared=False,
        seed=seed,
    )
    config = train_config_for(
        hp, 1, seed=seed, patience=patience, epochs=epochs, penalties=False
    )
    trained, report = train(model, [dataset], config)
    test_rmse = rmse(predict(trained, 0, dataset.test.X), dataset.test.y)
    return trained, report, test_rmse


@dataclass
class TrialResult:
    trial: int
    hp: HyperParams
    val_mse: float | None
    error: str | None = None


def _run_trial(args):
    tasks, hp, trial, seed, patience, epochs = args
    try:
        _, report = fit_mtl(
            tasks, hp, seed=(seed, _STREAM_TRIAL, trial), patience=patience, epochs=epochs
        )
        return TrialResult(trial, hp, report.best_val_mse)
    except Exception as exc:  # a diverged trial is data, not a crash
        return TrialResult(trial, hp, None, error=f"{type(exc).__name__}: {exc}")


def run_hpsearch(
    tasks: list[TaskSplits],
    trials: int,
    rng: np.random.Generator,
    *,
    seed: int = 0,
    patience: int = DESK_PATIENCE,
    epochs: int | None = None,
    jobs: int = 1,
    mode: str = "random",
):
    """Hyperparameter search: train one model per setting, select by
    smallest validation MSE.

    ``mode="random"`` (the default) samples ``trials`` settings with
    ``rng``; ``mode="grid"`` walks the exhaustive enumeration instead,
    capped at ``trials`` settings. Ties break toward the earliest trial.
    Raises RuntimeError if every trial failed. Returns
    (best HyperParams, list of TrialResult).
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if mode == "random":
        settings = [sample_hyperparams(rng) for _ in range(trials)]
    elif mode == "grid":
        settings = list(itertools.islice(grid_hyperparams(), trials))
    else:
        raise ValueError(f"mode must be 'random' or 'grid', got {mode!r}")
    payloads = [(tasks, hp, i, seed, patience, epochs) for i, hp in enumerate(settings)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_trial, payloads))
    else:
        results = [_run_trial(p) for p in payloads]
    results.sort(key=lambda t: t.trial)
    scored = [t for t in results if t.val_mse is not None and np.isfinite(t.val_mse)]
    if not scored:
        messages = "; ".join(f"trial {t.trial}: {t.error}" for t in results)
        raise RuntimeError(f"all {trials} trials failed: {messages}")
    best = min(scored, key=lambda t: (t.val_mse, t.trial))
    return best.hp, results


@dataclass(frozen=True)
class MetricRow:
    setting: str
    seed: int
    task: int  # 1-based in all emitted tables
    method: str
    split: str
    rmse: float


@dataclass(frozen=True)
class AggregateRow:
    setting: str
    task: int
    method: str
    mean_rmse: float
    sd_rmse: float
    n_seeds: int


@dataclass
class SweepResult:
    rows: list[MetricRow]
    aggregates: list[AggregateRow]
    failures: list[tuple[int, str]]

    def mean_rmse(self, method: str) -> float:
        """Mean test RMSE over all tasks and seeds for one method."""
        vals = [r.rmse for r in self.rows if r.method == method and r.split == "test"]
        if not vals:
            raise ValueError(f"no rows for method {method!r}")
        return float(np.mean(vals))


def aggregate_rows(rows: list[MetricRow]) -> list[AggregateRow]:
    """Mean/SD of test RMSE per (setting, task, method), recomputable
    from the raw rows. SD is the population form so one seed gives 0."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        if row.split != "test":
            continue
        groups.setdefault((row.setting, row.task, row.method), []).append(row.rmse)
    out = []
    for (setting, task, method), vals in sorted(groups.items()):
        out.append(
            AggregateRow(
                setting,
                task,
                method,
                float(np.mean(vals)),
                float(np.std(vals)),
                len(vals),
            )
        )
    return out


def _replicate_one(args):
    setting, seed, overrides, hp, stl_hp, patience, epochs = args
    try:
        cfg = make_setting(setting, seed=seed, **overrides)
        study = generate(cfg)
        rows = []
        mtl, _ = fit_mtl(
            study.tasks,
            hp,
            seed=(seed, _STREAM_MTL_INIT),
            patience=patience,
            epochs=epochs,
        )
        for r, task in enumerate(study.tasks):
            err = rmse(predict(mtl, r, task.test.X), task.test.y)
            rows.append(MetricRow(setting, seed, r + 1, "MTL", "test", err))
        for r, task in enumerate(study.tasks):
            _, _, err = train_stl_baseline(
                task, stl_hp, seed=(seed, _STREAM_STL, r), patience=patience, epochs=epochs
            )
            rows.append(MetricRow(setting, seed, r + 1, "STL", "test", err))
        return ("ok", seed, rows)
    except Exception as exc:
        return ("err", seed, f"{type(exc).__name__}: {exc}")


def run_replications(
    setting: str,
    seeds,
    *,
    overrides: dict | None = None,
    hp: HyperParams = DESK_HP,
    stl_hp: HyperParams | None = None,
    patience: int = DESK_PATIENCE,
    epochs: int | None = None,
    jobs: int = 1,
) -> SweepResult:
    """Generate-fit-score replications of one study setting.

    ``seeds`` is either a count (0..n-1) or an explicit list. Each seed
    draws a fresh study, fits the multi-task model and one single-task
    baseline per task, and records test RMSEs. Per-seed failures are
    recorded and the sweep continues.
    """
    if isinstance(seeds, (int, np.integer)):
        seeds = list(range(int(seeds)))
    else:
        seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    overrides = dict(overrides or {})
    stl_hp = stl_hp if stl_hp is not None else hp
    payloads = [(setting, s, overrides, hp, stl_hp, patience, epochs) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_replicate_one, payloads))
    else:
        outcomes = [_replicate_one(p) for p in payloads]
    outcomes.sort(key=lambda o: o[1])

    rows: list[MetricRow] = []
    failures: list[tuple[int, str]] = []
    for status, seed, result in outcomes:
        if status == "ok":
            rows.extend(result)
        else:
            failures.append((seed, result))
    rows.sort(key=lambda r: (r.seed, r.task, r.method, r.split))
    return SweepResult(rows, aggregate_rows(rows), failures)


def export_latents(
    model: MtlModel,
    datasets: list[TaskSplits],
    out_dir: Path,
    split: str = "train",
) -> list[Path]:
    """Write each task's encoder outputs as CSVs for external tooling.

    One file per task per encoder, rows aligned with the chosen split's
    rows, plus a task-id column. Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in range(model.n_tasks):
        ds = getattr(datasets[r], split)
        lat = latents(model, r, ds.X)
        spec_path = out_dir / f"latents_task_{r + 1}_specific.csv"
        header = ["task"] + [f"s{j + 1}" for j in range(lat.specific.shape[1])]
        write_csv(spec_path, header, ([r + 1] + list(row) for row in lat.specific))
        paths.append(spec_path)
        if model.shared is not None:
            shared_path = out_dir / f"latents_task_{r + 1}_shared.csv"
            header = ["task"] + [f"c{j + 1}" for j in range(lat.shared.shape[1])]
            write_csv(shared_path, header, ([r + 1] + list(row) for row in lat.shared))
            paths.append(shared_path)
    return paths


def relative_center_distances(model: MtlModel) -> list[tuple[float, float]]:
    """Per task: head-to-center distance over center norm, for both
    blocks. NaN marks the undefined case of a zero-norm center."""
    alpha_norm = float(np.linalg.norm(model.centers.alpha_bar))
    beta_norm = float(np.linalg.norm(model.centers.beta_bar))
    out = []
    for head in model.heads:
        da = float(np.linalg.norm(head.alpha - model.centers.alpha_bar))
        db = float(np.linalg.norm(head.beta - model.centers.beta_bar))
        out.append(
            (
                da / alpha_norm if alpha_norm > 0 else float("nan"),
                db / beta_norm if beta_norm > 0 else float("nan"),
            )
        )
    return out

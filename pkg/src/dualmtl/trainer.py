"""Three-block alternating training loop.

Each mini-batch iteration runs, in order:

  1. one Adam step on all encoder parameters (heads and centers fixed),
     against the fit term plus the cross-Gram redundancy penalty;
  2. the beta block: a proximal-gradient step on each task's deviation
     v_r = beta_r - beta_bar (block soft-threshold, so deviations can
     collapse exactly to zero), then a closed-form least-squares solve
     for the center beta_bar over the current batches;
  3. the alpha block, mirroring step 2 with the specific-encoder
     features. By default it sees the beta values from *before* this
     batch's step 2 (the displayed update order of the algorithm);
     ``fresh_beta_in_alpha`` switches to the just-updated values.

Early stopping tracks unpenalized validation MSE per epoch and returns
the best-epoch parameters. Everything is deterministic given the config
seed: per-task shuffle streams are derived as default_rng([seed, 2, r]).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, OptimizerError
from .model import (
    Centers,
    LatentBatch,
    MtlModel,
    PenaltyWeights,
    TaskHead,
    latents,
    objective,
    predict_from_latents,
    validation_mse,
)
from .nncore import AdamState, LrSchedule, adam_step, backward, init_dense, lr_at

CENTER_RIDGE_JITTER = 1e-10

# rng stream tags, appended to the seed prefix
_STREAM_SHARED_INIT = 0
_STREAM_SPECIFIC_INIT = 1
_STREAM_SHUFFLE = 2


def seed_list(seed) -> list[int]:
    """Normalize an int or tuple-of-ints seed into a PCG64 seed prefix."""
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


@dataclass
class DeviationState:
    """Deviations-from-center parametrization of one head block."""

    v: list[np.ndarray]
    center: np.ndarray

    def head(self, r: int) -> np.ndarray:
        return self.v[r] + self.center


@dataclass
class TrainConfig:
    epochs: int
    batch_sizes: int | list[int]
    schedule: LrSchedule
    weights: PenaltyWeights
    patience: int = 200
    inner_steps: int = 1
    seed: int | tuple[int, ...] = 0
    encoder_lr_scale: float = 1.0  # 0 freezes step 1 (encoders stay at init)
    fresh_beta_in_alpha: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        sizes = self.batch_sizes if isinstance(self.batch_sizes, list) else [self.batch_sizes]
        if any(b < 1 for b in sizes):
            raise ValueError(f"batch sizes must be >= 1, got {self.batch_sizes}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.encoder_lr_scale < 0:
            raise ValueError(f"encoder_lr_scale must be >= 0, got {self.encoder_lr_scale}")

    def batch_size_list(self, n_tasks: int) -> list[int]:
        if isinstance(self.batch_sizes, int):
            return [self.batch_sizes] * n_tasks
        if len(self.batch_sizes) != n_tasks:
            raise ValueError(
                f"got {len(self.batch_sizes)} batch sizes for {n_tasks} tasks"
            )
        return list(self.batch_sizes)


@dataclass
class TrainReport:
    """Per-epoch curves plus end-of-training diagnostics.

    ``history`` holds equal-length lists keyed by total / mse /
    similarity / orthogonality / val_mse / lr; objective terms are
    evaluated on the full training data at each epoch end (the
    orthogonality entry is therefore the full-data value, unlike the
    mini-batch term the optimizer sees). ``cross_gram_fro`` is the
    unweighted full-training-data ||S'C||_F per task at the returned
    parameters. ``max_param_norm`` is the largest absolute encoder
    parameter entry, recorded so boundedness can be inspected.
    """

    epochs_run: int = 0
    history: dict[str, list[float]] = field(default_factory=dict)
    best_epoch: int = 0
    best_val_mse: float = math.inf
    alpha_center_dist: list[float] = field(default_factory=list)
    beta_center_dist: list[float] = field(default_factory=list)
    cross_gram_fro: list[float] = field(default_factory=list)
    max_param_norm: float = 0.0
    ridge_jitter_used: bool = False
    wall_clock_s: float = 0.0


def prox_group(v: np.ndarray, threshold: float) -> np.ndarray:
    """Block soft-threshold: (1 - threshold/||v||)_+ v.

    Returns the zero vector when ||v|| <= threshold; the identity when
    threshold is 0. This is the proximal map of threshold * ||.||.
    """
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= threshold:
        return np.zeros_like(v)
    return (1.0 - threshold / norm) * v


def build_model(
    d: int,
    n_tasks: int,
    *,
    depth_s: int,
    width_s: int,
    q: int,
    depth_c: int | None = None,
    width_c: int | None = None,
    p: int | None = None,
    with_shared: bool = True,
    seed: int | tuple[int, ...] = 0,
) -> MtlModel:
    """Fresh model: He-initialized encoders, zero heads and centers.

    Zero heads make every shrinkage penalty vanish at the start. With
    ``with_shared=False`` the shared path is dropped entirely and heads
    carry length-0 beta vectors (the single-task architecture).
    """
    prefix = seed_list(seed)
    dims_s = [d] + [width_s] * (depth_s - 1) + [q]
    specifics = [
        init_dense(dims_s, np.random.default_rng(prefix + [_STREAM_SPECIFIC_INIT, r]))
        for r in range(n_tasks)
    ]
    if with_shared:
        if depth_c is None or width_c is None or p is None:
            raise ValueError("shared-path architecture (depth_c, width_c, p) is required")
        dims_c = [d] + [width_c] * (depth_c - 1) + [p]
        shared = init_dense(dims_c, np.random.default_rng(prefix + [_STREAM_SHARED_INIT]))
        p_out = p
    else:
        shared = None
        p_out = 0
    heads = [TaskHead(np.zeros(q), np.zeros(p_out)) for _ in range(n_tasks)]
    centers = Centers(np.zeros(q), np.zeros(p_out))
    return MtlModel(shared, specifics, heads, centers)


def init_adam_states(model: MtlModel) -> dict[str, AdamState]:
    states: dict[str, AdamState] = {}
    if model.shared is not None:
        states["shared"] = AdamState.for_params(
            model.shared.params(), model.shared.param_names("shared.")
        )
    for r, net in enumerate(model.specifics):
        states[f"specific_{r}"] = AdamState.for_params(
            net.params(), net.param_names(f"specific_{r}.")
        )
    return states


def _interleave(weight_grads, bias_grads):
    out = []
    for w, b in zip(weight_grads, bias_grads):
        out.append(w)
        out.append(b)
    return out


def latent_upstream_grads(
    model: MtlModel,
    r: int,
    lat: LatentBatch,
    y: np.ndarray,
    lambda_o: float,
):
    """Gradients of the step-1 loss w.r.t. one task's encoder outputs.

    The fit term contributes 2/(R*n_b) * residual x head per sample; the
    cross-Gram penalty adds 2*lambda_o * shared @ gram' on the specific
    side and its mirror on the shared side.
    """
    resid = predict_from_latents(lat, model.heads[r]) - y
    if not np.isfinite(resid).all():
        raise DivergenceError("non-finite residuals in encoder step")
    coef = 2.0 / (model.n_tasks * y.shape[0])
    upstream_s = coef * np.outer(resid, model.heads[r].alpha)
    upstream_c = coef * np.outer(resid, model.heads[r].beta)
    if lambda_o > 0 and model.shared is not None:
        gram = lat.specific.T @ lat.shared  # (q, p)
        upstream_s = upstream_s + (2.0 * lambda_o) * (lat.shared @ gram.T)
        upstream_c = upstream_c + (2.0 * lambda_o) * (lat.specific @ gram)
    return upstream_s, upstream_c


def encoder_gradients(
    model: MtlModel,
    batches: list[tuple[np.ndarray, np.ndarray]],
    weights: PenaltyWeights,
) -> dict[str, list[np.ndarray]]:
    """Exact gradients of the step-1 loss for every encoder's blocks.

    Keys match ``init_adam_states``; the shared encoder's gradient sums
    the contributions from every task's batch.
    """
    grads: dict[str, list[np.ndarray]] = {}
    shared_grads = None
    for r, (X, y) in enumerate(batches):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        lat = latents(model, r, X)
        upstream_s, upstream_c = latent_upstream_grads(model, r, lat, y, weights.lambda_o)
        wg, bg, _ = backward(model.specifics[r], X, upstream_s)
        grads[f"specific_{r}"] = _interleave(wg, bg)
        if model.shared is not None:
            wg, bg, _ = backward(model.shared, X, upstream_c)
            blocks = _interleave(wg, bg)
            if shared_grads is None:
                shared_grads = blocks
            else:
                shared_grads = [a + g for a, g in zip(shared_grads, blocks)]
    if shared_grads is not None:
        grads["shared"] = shared_grads
    return grads


def step1_encoders(
    model: MtlModel,
    batches: list[tuple[np.ndarray, np.ndarray]],
    weights: PenaltyWeights,
    rate: float,
    adam_states: dict[str, AdamState],
) -> None:
    """One Adam step on all encoders; heads and centers untouched."""
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    grads = encoder_gradients(model, batches, weights)
    for r in range(model.n_tasks):
        adam_step(
            model.specifics[r].params(), grads[f"specific_{r}"], adam_states[f"specific_{r}"], rate
        )
    if model.shared is not None:
        adam_step(model.shared.params(), grads["shared"], adam_states["shared"], rate)


def _solve_center(gram: np.ndarray, rhs: np.ndarray):
    """Normal-equation solve with a tiny ridge fallback for singularity."""
    if gram.shape[0] == 0:
        return np.zeros(0), False
    try:
        sol = np.linalg.solve(gram, rhs)
        if np.isfinite(sol).all():
            return sol, False
    except np.linalg.LinAlgError:
        pass
    sol = np.linalg.solve(gram + CENTER_RIDGE_JITTER * np.eye(gram.shape[0]), rhs)
    return sol, True


def _coefficient_block_update(
    features: list[np.ndarray],
    targets: list[np.ndarray],
    dev: DeviationState,
    lambdas: np.ndarray,
    rate: float,
    inner_steps: int,
) -> bool:
    """Shared machinery of steps 2 and 3 in deviation form.

    ``targets`` already exclude the other block's contribution, so the
    per-task fit term is ||targets_r - features_r @ (v_r + center)||^2
    scaled by 1/(R*n_b). Each inner iteration runs one proximal step per
    task followed by one exact center solve. Returns True if the center
    solve needed the ridge fallback.
    """
    n_tasks = len(features)
    jitter = False
    for _ in range(inner_steps):
        for r in range(n_tasks):
            feat = features[r]
            n_b = feat.shape[0]
            resid = feat @ (dev.v[r] + dev.center) - targets[r]
            grad = (2.0 / (n_tasks * n_b)) * (feat.T @ resid)
            dev.v[r] = prox_group(dev.v[r] - rate * grad, rate * float(lambdas[r]))
        dim = dev.center.shape[0]
        gram = np.zeros((dim, dim))
        rhs = np.zeros(dim)
        for r in range(n_tasks):
            feat = features[r]
            w = 1.0 / (n_tasks * feat.shape[0])
            gram += w * (feat.T @ feat)
            rhs += w * (feat.T @ (targets[r] - feat @ dev.v[r]))
        dev.center, jit = _solve_center(gram, rhs)
        jitter |= jit
    return jitter


def step2_beta(
    model: MtlModel,
    batches: list[tuple[np.ndarray, np.ndarray]],
    weights: PenaltyWeights,
    rate: float,
    inner_steps: int = 1,
    latent_batches: list[LatentBatch] | None = None,
) -> bool:
    """Update the beta heads and their center; encoders and alphas fixed.

    Returns True if the center solve hit the ridge fallback. No-op for a
    model without a shared path.
    """
    if model.shared is None or model.p == 0:
        return False
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    if latent_batches is None:
        latent_batches = [latents(model, r, X) for r, (X, _) in enumerate(batches)]
    targets = [
        np.asarray(y, dtype=np.float64) - lat.specific @ model.heads[r].alpha
        for r, ((_, y), lat) in enumerate(zip(batches, latent_batches))
    ]
    dev = DeviationState(
        [model.heads[r].beta - model.centers.beta_bar for r in range(model.n_tasks)],
        model.centers.beta_bar.copy(),
    )
    jitter = _coefficient_block_update(
        [lat.shared for lat in latent_batches], targets, dev, weights.lambda_c, rate, inner_steps
    )
    model.centers.beta_bar = dev.center
    for r in range(model.n_tasks):
        model.heads[r].beta = dev.head(r)
    return jitter


def step3_alpha(
    model: MtlModel,
    batches: list[tuple[np.ndarray, np.ndarray]],
    weights: PenaltyWeights,
    rate: float,
    inner_steps: int = 1,
    latent_batches: list[LatentBatch] | None = None,
    stale_betas: list[np.ndarray] | None = None,
) -> bool:
    """Mirror of step 2 for the alpha heads on the specific features.

    ``stale_betas``, when given, are the beta vectors from before this
    batch's step 2, matching the displayed update order; omit them to
    use the freshly updated values.
    """
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    if latent_batches is None:
        latent_batches = [latents(model, r, X) for r, (X, _) in enumerate(batches)]
    betas = stale_betas if stale_betas is not None else [h.beta for h in model.heads]
    targets = [
        np.asarray(y, dtype=np.float64) - lat.shared @ betas[r]
        for r, ((_, y), lat) in enumerate(zip(batches, latent_batches))
    ]
    dev = DeviationState(
        [model.heads[r].alpha - model.centers.alpha_bar for r in range(model.n_tasks)],
        model.centers.alpha_bar.copy(),
    )
    jitter = _coefficient_block_update(
        [lat.specific for lat in latent_batches], targets, dev, weights.lambda_s, rate, inner_steps
    )
    model.centers.alpha_bar = dev.center
    for r in range(model.n_tasks):
        model.heads[r].alpha = dev.head(r)
    return jitter


class _BatchStream:
    """Shuffled index stream for one task; fresh shuffle on exhaustion."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = np.empty(0, dtype=np.intp)
        self._pos = 0

    def reshuffle(self):
        self._perm = self.rng.permutation(self.n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._pos >= self._perm.shape[0]:
            self.reshuffle()
        idx = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def train(model: MtlModel, datasets, config: TrainConfig):
    """Run the alternating algorithm; returns (trained model, report).

    ``datasets`` is one entry per task with ``.train`` and ``.val``
    splits (each exposing X and y). The input model is not modified; the
    returned model carries the parameters of the best validation epoch.
    Raises DivergenceError (with the epoch index) if the objective goes
    non-finite, ValueError for empty or mismatched datasets.
    """
    t0 = time.perf_counter()
    n_tasks = model.n_tasks
    if len(datasets) != n_tasks:
        raise ValueError(f"model has {n_tasks} tasks but got {len(datasets)} datasets")
    for ds in datasets:
        if ds.train.X.shape[0] < 1:
            raise ValueError("every task needs at least one training row")
        if ds.train.X.shape[1] != model.in_dim:
            raise ValueError(
                f"dataset has {ds.train.X.shape[1]} features, model expects {model.in_dim}"
            )

    work = model.copy()
    batch_sizes = config.batch_size_list(n_tasks)
    prefix = seed_list(config.seed)
    streams = [
        _BatchStream(
            datasets[r].train.X.shape[0],
            batch_sizes[r],
            np.random.default_rng(prefix + [_STREAM_SHUFFLE, r]),
        )
        for r in range(n_tasks)
    ]
    joint_batches = max(
        math.ceil(datasets[r].train.X.shape[0] / streams[r].batch_size) for r in range(n_tasks)
    )
    adam_states = init_adam_states(work)

    full_train = [(ds.train.X, ds.train.y) for ds in datasets]
    val_sets = [(ds.val.X, ds.val.y) for ds in datasets]

    history: dict[str, list[float]] = {
        k: [] for k in ("total", "mse", "similarity", "orthogonality", "val_mse", "lr")
    }
    best_val = math.inf
    best_epoch = 0
    best_snapshot = work.copy()
    since_best = 0
    jitter_used = False
    epochs_run = 0

    for epoch in range(config.epochs):
        rate = lr_at(config.schedule, epoch)
        encoder_rate = rate * config.encoder_lr_scale
        for stream in streams:
            stream.reshuffle()
        for b in range(joint_batches):
            batch = []
            for r in range(n_tasks):
                idx = streams[r].next_indices()
                batch.append((datasets[r].train.X[idx], datasets[r].train.y[idx]))
            if rate <= 0.0:
                continue  # degenerate schedule: no updates at all
            try:
                if encoder_rate > 0.0:
                    step1_encoders(work, batch, config.weights, encoder_rate, adam_states)
                lat = [latents(work, r, X) for r, (X, _) in enumerate(batch)]
                stale = None
                if not config.fresh_beta_in_alpha:
                    stale = [h.beta.copy() for h in work.heads]
                jitter_used |= step2_beta(
                    work, batch, config.weights, rate, config.inner_steps, latent_batches=lat
                )
                jitter_used |= step3_alpha(
                    work,
                    batch,
                    config.weights,
                    rate,
                    config.inner_steps,
                    latent_batches=lat,
                    stale_betas=stale,
                )
            except (OptimizerError, DivergenceError) as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from exc

        total, breakdown = objective(work, full_train, config.weights)
        val = validation_mse(work, val_sets)
        if not (np.isfinite(total) and np.isfinite(val)):
            raise DivergenceError(f"non-finite objective at epoch {epoch}")
        history["total"].append(breakdown["total"])
        history["mse"].append(breakdown["mse"])
        history["similarity"].append(breakdown["similarity"])
        history["orthogonality"].append(breakdown["orthogonality"])
        history["val_mse"].append(val)
        history["lr"].append(rate)
        epochs_run = epoch + 1

        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_snapshot = work.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break

    result = best_snapshot
    cross_gram = []
    for r, ds in enumerate(datasets):
        lat = latents(result, r, ds.train.X)
        cross_gram.append(float(np.linalg.norm(lat.specific.T @ lat.shared)))
    report = TrainReport(
        epochs_run=epochs_run,
        history=history,
        best_epoch=best_epoch,
        best_val_mse=best_val,
        alpha_center_dist=[
            float(np.linalg.norm(h.alpha - result.centers.alpha_bar)) for h in result.heads
        ],
        beta_center_dist=[
            float(np.linalg.norm(h.beta - result.centers.beta_bar)) for h in result.heads
        ],
        cross_gram_fro=cross_gram,
        max_param_norm=result.max_param_norm(),
        ridge_jitter_used=jitter_used,
        wall_clock_s=time.perf_counter() - t0,
    )
    return result, report

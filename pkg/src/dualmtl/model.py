"""Dual-encoder prediction model and the penalized training objective.

A prediction for task r is alpha_r . specific_r(x) + beta_r . shared(x):
every task owns a feature encoder and a linear head, and one shared
encoder feeds all tasks. Heads are shrunk toward common center vectors
by unsquared (group-norm) penalties, and a cross-Gram penalty discourages
the specific and shared latent blocks from encoding the same directions.

The single-task variant drops the shared path entirely (``shared=None``);
its heads carry length-0 beta vectors so all operations stay uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nncore import DenseNet, forward


@dataclass
class TaskHead:
    alpha: np.ndarray  # (q,)
    beta: np.ndarray  # (p,); length 0 when the model has no shared encoder

    def copy(self) -> "TaskHead":
        return TaskHead(self.alpha.copy(), self.beta.copy())


@dataclass
class Centers:
    alpha_bar: np.ndarray  # (q,)
    beta_bar: np.ndarray  # (p,)

    def copy(self) -> "Centers":
        return Centers(self.alpha_bar.copy(), self.beta_bar.copy())


@dataclass
class PenaltyWeights:
    """Per-task head-shrinkage weights and the scalar cross-Gram weight."""

    lambda_s: np.ndarray  # (R,), >= 0, weights on ||alpha_r - alpha_bar||
    lambda_c: np.ndarray  # (R,), >= 0, weights on ||beta_r - beta_bar||
    lambda_o: float = 0.0

    def __post_init__(self):
        self.lambda_s = np.atleast_1d(np.asarray(self.lambda_s, dtype=np.float64))
        self.lambda_c = np.atleast_1d(np.asarray(self.lambda_c, dtype=np.float64))
        bad = (
            np.any(self.lambda_s < 0)
            or np.any(self.lambda_c < 0)
            or self.lambda_o < 0
            or not np.isfinite(self.lambda_s).all()
            or not np.isfinite(self.lambda_c).all()
            or not np.isfinite(self.lambda_o)
        )
        if bad:
            raise ValueError("penalty weights must be finite and non-negative")

    @classmethod
    def uniform(cls, n_tasks: int, lambda_s: float, lambda_c: float, lambda_o: float = 0.0):
        return cls(
            np.full(n_tasks, float(lambda_s)),
            np.full(n_tasks, float(lambda_c)),
            float(lambda_o),
        )


@dataclass
class LatentBatch:
    """Encoder outputs for one task's batch: rows are samples."""

    specific: np.ndarray  # (n_b, q)
    shared: np.ndarray  # (n_b, p); (n_b, 0) when no shared encoder

    def __post_init__(self):
        if self.specific.shape[0] != self.shared.shape[0]:
            raise ShapeError(
                f"latent row counts differ: {self.specific.shape[0]} vs {self.shared.shape[0]}"
            )


@dataclass
class MtlModel:
    shared: DenseNet | None
    specifics: list[DenseNet]
    heads: list[TaskHead]
    centers: Centers

    def __post_init__(self):
        r = len(self.specifics)
        if r < 1 or len(self.heads) != r:
            raise ShapeError("need one specific encoder and one head per task")
        q = self.specifics[0].out_dim
        d = self.specifics[0].in_dim
        for net in self.specifics:
            if net.out_dim != q or net.in_dim != d:
                raise ShapeError("all specific encoders must share in/out dims")
        p = self.shared.out_dim if self.shared is not None else 0
        if self.shared is not None and self.shared.in_dim != d:
            raise ShapeError("shared encoder in-dim must match specific encoders")
        for i, head in enumerate(self.heads):
            if head.alpha.shape != (q,) or head.beta.shape != (p,):
                raise ShapeError(f"head {i} does not match encoder output dims (q={q}, p={p})")
        if self.centers.alpha_bar.shape != (q,) or self.centers.beta_bar.shape != (p,):
            raise ShapeError("centers do not match encoder output dims")

    @property
    def n_tasks(self) -> int:
        return len(self.specifics)

    @property
    def in_dim(self) -> int:
        return self.specifics[0].in_dim

    @property
    def q(self) -> int:
        return self.specifics[0].out_dim

    @property
    def p(self) -> int:
        return self.shared.out_dim if self.shared is not None else 0

    def copy(self) -> "MtlModel":
        return MtlModel(
            self.shared.copy() if self.shared is not None else None,
            [net.copy() for net in self.specifics],
            [h.copy() for h in self.heads],
            self.centers.copy(),
        )

    def max_param_norm(self) -> float:
        """Largest absolute parameter entry over all encoder blocks."""
        blocks = []
        if self.shared is not None:
            blocks.extend(self.shared.params())
        for net in self.specifics:
            blocks.extend(net.params())
        return max(float(np.abs(b).max()) for b in blocks)


def _check_task(model: MtlModel, r: int) -> None:
    if not (0 <= r < model.n_tasks):
        raise IndexError(f"task index {r} out of range [0, {model.n_tasks})")


def latents(model: MtlModel, r: int, X: np.ndarray) -> LatentBatch:
    """Both encoders' outputs for task r on batch X."""
    _check_task(model, r)
    specific = forward(model.specifics[r], X)
    if model.shared is not None:
        shared = forward(model.shared, X)
    else:
        shared = np.zeros((specific.shape[0], 0))
    return LatentBatch(specific, shared)


def predict_from_latents(lat: LatentBatch, head: TaskHead) -> np.ndarray:
    return lat.specific @ head.alpha + lat.shared @ head.beta


def predict(model: MtlModel, r: int, X: np.ndarray) -> np.ndarray:
    """Predicted responses for task r, one per row of X."""
    return predict_from_latents(latents(model, r, X), model.heads[r])


def mse_term(model: MtlModel, r: int, X: np.ndarray, y: np.ndarray) -> float:
    """Mean squared residual of task r on the given batch."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != np.asarray(X).shape[0]:
        raise ShapeError(f"y shape {y.shape} incompatible with X rows {np.asarray(X).shape[0]}")
    resid = y - predict(model, r, X)
    return float(np.mean(np.square(resid)))


def similarity_penalty(heads: list[TaskHead], centers: Centers, weights: PenaltyWeights) -> float:
    """Sum over tasks of unsquared head-to-center distances, weighted.

    The norms are deliberately not squared: this is the group-lasso form
    whose proximal map can collapse a deviation exactly to zero.
    """
    if len(heads) != len(weights.lambda_s) or len(heads) != len(weights.lambda_c):
        raise ShapeError("one lambda_s and lambda_c per task head")
    total = 0.0
    for head, ls, lc in zip(heads, weights.lambda_s, weights.lambda_c):
        total += ls * float(np.linalg.norm(head.alpha - centers.alpha_bar))
        total += lc * float(np.linalg.norm(head.beta - centers.beta_bar))
    return total


def orthogonality_penalty(latent_batches: list[LatentBatch], lambda_o: float) -> float:
    """lambda_o * sum_r of squared Frobenius norm of specific'-shared cross-Grams.

    Evaluated on whatever rows the batches carry; the trainer feeds
    mini-batches, reports feed full datasets.
    """
    if lambda_o == 0.0:
        return 0.0
    total = 0.0
    for lat in latent_batches:
        gram = lat.specific.T @ lat.shared  # (q, p)
        total += lambda_o * float(np.sum(np.square(gram)))
    return total


def objective(
    model: MtlModel,
    batches: list[tuple[np.ndarray, np.ndarray]],
    weights: PenaltyWeights,
):
    """Full training objective on one batch per task.

    Returns (total, breakdown) where breakdown has keys mse, similarity,
    orthogonality, total, summing to the total within float round-off.
    """
    if len(batches) != model.n_tasks:
        raise ShapeError(f"expected {model.n_tasks} batches, got {len(batches)}")
    lat = [latents(model, r, X) for r, (X, _) in enumerate(batches)]
    mse = 0.0
    for r, (X, y) in enumerate(batches):
        y = np.asarray(y, dtype=np.float64)
        if y.shape[0] != X.shape[0]:
            raise ShapeError(f"task {r}: y length {y.shape[0]} != X rows {X.shape[0]}")
        resid = y - predict_from_latents(lat[r], model.heads[r])
        mse += float(np.mean(np.square(resid)))
    mse /= model.n_tasks
    sim = similarity_penalty(model.heads, model.centers, weights)
    orth = orthogonality_penalty(lat, weights.lambda_o)
    total = mse + sim + orth
    return total, {"mse": mse, "similarity": sim, "orthogonality": orth, "total": total}


def validation_mse(model: MtlModel, val_sets: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Unpenalized mean of per-task MSEs; the early-stopping criterion."""
    return float(np.mean([mse_term(model, r, X, y) for r, (X, y) in enumerate(val_sets)]))

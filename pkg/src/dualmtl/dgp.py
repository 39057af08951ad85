"""Synthetic latent-factor study generator.

Every task's inputs come from one pool of standard-normal latent rows F:
task r sees F_r = F @ V_r, where the V_r are orthonormal-column mixing
matrices that share their first d_c columns across tasks (the shared
latent directions) and draw the remaining d - d_c columns independently
per task. Observations are X_r = F_r @ B + noise with one common
orthogonal B, and responses are a coefficient mix gamma_c + gamma_r
applied to the elementwise square of F_r (or to F_r itself in the
linear variant), scaled by 1/d, plus noise.

Three equal splits (train/val/test) of n_r rows each are produced per
task. All randomness flows through PCG64 generators seeded with
documented stream lists, so a (config, seed) pair reproduces a study
bit for bit:

    [seed, 10]        F
    [seed, 11]        shared V block
    [seed, 12, r]     task r's V block
    [seed, 13]        B (drawn once, shared by all tasks)
    [seed, 14, r]     task r's X noise
    [seed, 15]        gamma_c
    [seed, 16, r]     gamma_r
    [seed, 17, r]     task r's response noise
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULTS = {"n_r": 200, "d": 20, "d_c": 10, "sigma_e": 0.05, "sigma_c": 10.0, "sigma_bar": 1.0}

SETTING_IDS = ("1", "2", "3", "4", "5", "6", "4tasks", "5tasks", "linear")


@dataclass
class DgpConfig:
    n_tasks: int
    n_r: list[int]  # per-task sample count; 3*n_r rows are generated
    d: int
    d_c: int
    sigma_e: float
    sigma_c: float
    sigma_r: list[float]
    linear: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError(f"need at least one task, got {self.n_tasks}")
        if isinstance(self.n_r, int):
            self.n_r = [self.n_r] * self.n_tasks
        if isinstance(self.sigma_r, (int, float)):
            self.sigma_r = [float(self.sigma_r)] * self.n_tasks
        if len(self.n_r) != self.n_tasks or len(self.sigma_r) != self.n_tasks:
            raise ValueError("n_r and sigma_r must have one entry per task")
        if any(n < 1 for n in self.n_r):
            raise ValueError(f"per-task sample counts must be >= 1, got {self.n_r}")
        if not (0 <= self.d_c <= self.d):
            raise ValueError(f"d_c must lie in [0, d]; got d_c={self.d_c}, d={self.d}")
        if self.sigma_e < 0 or self.sigma_c < 0 or any(s < 0 for s in self.sigma_r):
            raise ValueError("noise and coefficient scales must be >= 0")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


@dataclass
class TaskDataset:
    X: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)
    role: str  # train | val | test
    task_id: int


@dataclass
class TaskSplits:
    train: TaskDataset
    val: TaskDataset
    test: TaskDataset


@dataclass
class StudyFactors:
    """Realized random quantities, kept so responses can be re-derived."""

    F_r: list[np.ndarray]
    V_r: list[np.ndarray]
    B: np.ndarray
    gamma_c: np.ndarray
    gamma_r: list[np.ndarray]
    eps_r: list[np.ndarray]


@dataclass
class GeneratedStudy:
    config: DgpConfig
    tasks: list[TaskSplits]
    factors: StudyFactors

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)


def _svd_v(rng: np.random.Generator, d: int) -> np.ndarray:
    """Right-singular-vector matrix of a random d x d Gaussian draw."""
    _, _, vt = np.linalg.svd(rng.standard_normal((d, d)))
    return vt.T


def response_signal(F_r: np.ndarray, gamma: np.ndarray, d: int, linear: bool) -> np.ndarray:
    """Noise-free response: coefficient mix applied to F_r or its square."""
    basis = F_r if linear else F_r * F_r
    return basis @ gamma / d


def generate(config: DgpConfig) -> GeneratedStudy:
    """Draw one study. See the module docstring for the stream layout."""
    seed, d, d_c = config.seed, config.d, config.d_c
    n_max = max(config.n_r)
    F = np.random.default_rng([seed, 10]).standard_normal((3 * n_max, d))
    shared_cols = _svd_v(np.random.default_rng([seed, 11]), d)[:, :d_c]
    B = np.linalg.qr(np.random.default_rng([seed, 13]).standard_normal((d, d)))[0]
    gamma_c = np.random.default_rng([seed, 15]).standard_normal(d) * config.sigma_c

    tasks: list[TaskSplits] = []
    F_list, V_list, gr_list, eps_list = [], [], [], []
    for r in range(config.n_tasks):
        n = config.n_r[r]
        task_cols = _svd_v(np.random.default_rng([seed, 12, r]), d)[:, : d - d_c]
        V_r = np.hstack([shared_cols, task_cols])
        F_r = F[: 3 * n] @ V_r
        E_r = np.random.default_rng([seed, 14, r]).standard_normal((3 * n, d)) * config.sigma_e
        X_r = F_r @ B + E_r
        gamma_r = np.random.default_rng([seed, 16, r]).standard_normal(d) * config.sigma_r[r]
        eps_r = np.random.default_rng([seed, 17, r]).standard_normal(3 * n) * config.sigma_e
        y_r = response_signal(F_r, gamma_c + gamma_r, d, config.linear) + eps_r

        splits = []
        for k, role in enumerate(("train", "val", "test")):
            sl = slice(k * n, (k + 1) * n)
            splits.append(TaskDataset(X_r[sl].copy(), y_r[sl].copy(), role, r))
        tasks.append(TaskSplits(*splits))
        F_list.append(F_r)
        V_list.append(V_r)
        gr_list.append(gamma_r)
        eps_list.append(eps_r)

    factors = StudyFactors(F_list, V_list, B, gamma_c, gr_list, eps_list)
    return GeneratedStudy(config, tasks, factors)


def make_setting(
    setting: str,
    *,
    n_r: int | list[int] | None = None,
    d_c: int | None = None,
    sigma_bar: float | None = None,
    seed: int = 0,
) -> DgpConfig:
    """Named study configurations used throughout the experiments.

    Settings 1-3 are two-task studies probing, respectively, input
    heterogeneity (d_c varies, identical response maps), response-map
    heterogeneity (fully shared latent directions, sigma_bar varies),
    and both at once. Settings 4-6 use three tasks with varying sample
    sizes or one outlier task; "4tasks"/"5tasks" scale the default
    study; "linear" is the small linear-response study.
    """
    setting = str(setting)
    if setting not in SETTING_IDS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {SETTING_IDS}")
    sbar = DEFAULTS["sigma_bar"] if sigma_bar is None else float(sigma_bar)
    d = DEFAULTS["d"]
    common = dict(
        d=d,
        sigma_e=DEFAULTS["sigma_e"],
        sigma_c=DEFAULTS["sigma_c"],
        seed=seed,
    )
    if setting == "1":
        cfg = DgpConfig(
            n_tasks=2,
            n_r=n_r if n_r is not None else DEFAULTS["n_r"],
            d_c=DEFAULTS["d_c"] if d_c is None else d_c,
            sigma_r=[0.0, 0.0],
            **common,
        )
    elif setting == "2":
        cfg = DgpConfig(
            n_tasks=2,
            n_r=n_r if n_r is not None else DEFAULTS["n_r"],
            d_c=d,  # fully shared latent directions
            sigma_r=[sbar, sbar],
            **common,
        )
    elif setting == "3":
        cfg = DgpConfig(
            n_tasks=2,
            n_r=n_r if n_r is not None else DEFAULTS["n_r"],
            d_c=DEFAULTS["d_c"] if d_c is None else d_c,
            sigma_r=[sbar, sbar],
            **common,
        )
    elif setting == "4":
        cfg = DgpConfig(
            n_tasks=3,
            n_r=n_r if n_r is not None else DEFAULTS["n_r"],
            d_c=DEFAULTS["d_c"] if d_c is None else d_c,
            sigma_r=[sbar, sbar, sbar],
            **common,
        )
    elif setting == "5":
        cfg = DgpConfig(
            n_tasks=3,
            n_r=n_r if n_r is not None else [200, 200, 400],
            d_c=DEFAULTS["d_c"] if d_c is None else d_c,
            sigma_r=[sbar, sbar, sbar],
            **common,
        )
    elif setting == "6":
        cfg = DgpConfig(
            n_tasks=3,
            n_r=n_r if n_r is not None else DEFAULTS["n_r"],
            d_c=DEFAULTS["d_c"] if d_c is None else d_c,
            sigma_r=[1.0, 1.0, 5.0],
            **common,
        )
    elif setting in ("4tasks", "5tasks"):
        k = 4 if setting == "4tasks" else 5
        cfg = DgpConfig(
            n_tasks=k,
            n_r=n_r if n_r is not None else DEFAULTS["n_r"],
            d_c=DEFAULTS["d_c"] if d_c is None else d_c,
            sigma_r=[sbar] * k,
            **common,
        )
    else:  # linear
        cfg = DgpConfig(
            n_tasks=3,
            n_r=n_r if n_r is not None else 50,
            d=40,
            d_c=20 if d_c is None else d_c,
            sigma_e=DEFAULTS["sigma_e"],
            sigma_c=DEFAULTS["sigma_c"],
            sigma_r=[sbar, sbar, sbar],
            linear=True,
            seed=seed,
        )
    return cfg

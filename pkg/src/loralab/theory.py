"""Closed-form capacity / tradeoff / timing quantities and the empirical
sweeps that confront them with training runs.

The hidden constants in the error decomposition and the noise-learning
threshold default to 1; only orders of growth are theoretically pinned, so
analyzers fit or sweep them empirically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .datagen import (NoisyDataset, Teacher, inject_symmetric_noise, make_teacher,
                      sample_dataset, teacher_tail_energy)
from .errors import ArgumentError
from .model import (LoraModel, TrainConfig, TrainHistory, accuracy, lora_init,
                    train)
from .numerics import softmax_cross_entropy_batch, top_singular_values
from .seeding import derive_seed


@dataclass(frozen=True)
class TheoryConstants:
    c_bias: float = 1.0
    c_var: float = 1.0
    c_noise: float = 1.0
    c_tstar: float = 1.0

    def __post_init__(self):
        for name in ("c_bias", "c_var", "c_noise", "c_tstar"):
            if getattr(self, name) <= 0:
                raise ArgumentError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class ErrorDecomposition:
    bias: float
    variance: float
    noise: float

    @property
    def total(self) -> float:
        return self.bias + self.variance + self.noise


def capacity(r: int, d: int, k: int) -> int:
    """Degrees of freedom r*(d + k - r) of a rank-r update to a (d, k) matrix."""
    if d < 1 or k < 1:
        raise ArgumentError(f"need positive dims, got ({d}, {k})")
    if not 0 <= r <= min(d, k):
        raise ArgumentError(f"r={r} outside [0, {min(d, k)}]")
    return r * (d + k - r)


def error_decomposition(r: float, n: int, d: int, eta: float, alpha: float,
                        consts: TheoryConstants = TheoryConstants()) -> ErrorDecomposition:
    """Bias / variance / noise split of the expected generalization error.

    bias = c_bias * r^(-2 alpha); variance = c_var * r d / n;
    noise = c_noise * eta * r d / n.
    """
    if r <= 0:
        raise ArgumentError("r must be positive (bias term is singular at 0)")
    if n < 1 or d < 1 or alpha <= 0 or not 0.0 <= eta < 1.0:
        raise ArgumentError(f"bad arguments n={n} d={d} eta={eta} alpha={alpha}")
    bias = consts.c_bias * r ** (-2.0 * alpha)
    variance = consts.c_var * r * d / n
    noise = consts.c_noise * eta * r * d / n
    return ErrorDecomposition(bias=bias, variance=variance, noise=noise)


def optimal_rank_exact(n: int, d: int, eta: float, alpha: float,
                       consts: TheoryConstants = TheoryConstants()) -> float:
    """The exact real-valued minimizer of :func:`error_decomposition` in r."""
    if n < 1 or d < 1 or alpha <= 0 or not 0.0 <= eta < 1.0:
        raise ArgumentError(f"bad arguments n={n} d={d} eta={eta} alpha={alpha}")
    combined = consts.c_var + consts.c_noise * eta
    return (2.0 * alpha * consts.c_bias * n / (combined * d)) ** (1.0 / (2.0 * alpha + 1.0))


def optimal_rank_scaling(n: int, d: int, eta: float, alpha: float) -> float:
    """The scaling form (n / (d (1 + eta)))^(1/(2 alpha + 1)), constants dropped."""
    if n < 1 or d < 1 or alpha <= 0 or not 0.0 <= eta < 1.0:
        raise ArgumentError(f"bad arguments n={n} d={d} eta={eta} alpha={alpha}")
    return (n / (d * (1.0 + eta))) ** (1.0 / (2.0 * alpha + 1.0))


def optimal_rank_on_grid(n: int, d: int, eta: float, alpha: float,
                         grid: list[int],
                         consts: TheoryConstants = TheoryConstants()) -> int:
    """Grid rank minimizing the decomposition total; ties go to the lower rank."""
    if not grid:
        raise ArgumentError("empty rank grid")
    best_r, best_total = None, math.inf
    for r in sorted(grid):
        total = error_decomposition(r, n, d, eta, alpha, consts).total
        if total < best_total:
            best_r, best_total = r, total
    return best_r


def noise_threshold_t_star(gamma: float, sigma_r: float, eta: float,
                           c_tstar: float = 1.0) -> float:
    """Noise-learning threshold c / (gamma sigma_r) * ln(1 / eta).

    At eta = 0 the threshold is unbounded and ``inf`` is returned.
    """
    if gamma <= 0 or sigma_r <= 0 or c_tstar <= 0:
        raise ArgumentError("gamma, sigma_r, c_tstar must be positive")
    if not 0.0 <= eta < 1.0:
        raise ArgumentError(f"eta must be in [0, 1), got {eta}")
    if eta == 0.0:
        return math.inf
    return c_tstar / (gamma * sigma_r) * math.log(1.0 / eta)


def estimate_t_star_empirical(history: TrainHistory, window: int = 3,
                              frac: float = 0.05) -> int | None:
    """First epoch where noisy loss drops by more than frac * its initial value
    over the next ``window`` epochs; None if that never happens."""
    if window < 1:
        raise ArgumentError(f"window must be >= 1, got {window}")
    if not 0.0 < frac < 1.0:
        raise ArgumentError(f"frac must be in (0, 1), got {frac}")
    noisy = history.noisy_loss
    if len(noisy) < window + 1:
        raise ArgumentError(f"history of {len(noisy)} epochs too short for window {window}")
    if np.isnan(noisy).any():
        raise ArgumentError("history has no noisy-loss series")
    base = noisy[0]
    for t in range(len(noisy) - window):
        if noisy[t] - noisy[t + window] > frac * base:
            return t
    return None


def half_life_epoch(series: np.ndarray) -> int | None:
    """First epoch index at which the series falls below half its initial value."""
    if len(series) == 0 or np.isnan(series).any():
        return None
    target = 0.5 * series[0]
    below = np.nonzero(series < target)[0]
    return int(below[0]) if len(below) else None


def gradient_covariance_sigma_r(model: LoraModel, x: np.ndarray,
                                labels: np.ndarray, r: int) -> float:
    """r-th singular value of the empirical per-sample gradient covariance.

    Stacks the flattened (B, A) loss gradients of each sample into G and
    returns the squared r-th singular value of G/sqrt(m), i.e. the r-th
    eigenvalue of G^T G / m, without materializing the covariance.
    """
    m = x.shape[0]
    if m < 1:
        raise ArgumentError("empty sample set")
    s = model.scaling
    h = x @ model.a.T                                # (m, r)
    logits = x @ model.w0.T + s * (h @ model.b.T)
    _, g = softmax_cross_entropy_batch(logits, labels)   # (m, d)
    gb = s * np.einsum("md,mr->mdr", g, h).reshape(m, -1)
    ga = s * np.einsum("mr,mk->mrk", g @ model.b, x).reshape(m, -1)
    grads = np.hstack([gb, ga])
    if not 1 <= r <= min(grads.shape):
        raise ArgumentError(f"r={r} outside available spectrum [1, {min(grads.shape)}]")
    values, _ = top_singular_values(grads / math.sqrt(m), r)
    return float(values[r - 1] ** 2)


def fit_alpha(ranks: np.ndarray, bias_values: np.ndarray) -> float:
    """Estimate the smoothness exponent from bias ~ r^(-2 alpha).

    Least-squares slope of log(bias) against log(rank), returned as -slope/2.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    bias_values = np.asarray(bias_values, dtype=np.float64)
    if len(ranks) < 3 or len(bias_values) != len(ranks):
        raise ArgumentError("need at least 3 matched (rank, bias) points")
    if np.any(bias_values <= 0) or np.any(ranks <= 0):
        raise ArgumentError("ranks and bias values must be positive for the log fit")
    lx = np.log(ranks)
    ly = np.log(bias_values)
    slope = float(np.cov(lx, ly, bias=True)[0, 1] / np.var(lx))
    return -slope / 2.0


# ---------------------------------------------------------------------------
# Empirical sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of the synthetic task shared by the sweep runners.

    The teacher maps inputs to ``num_classes`` scores; the trained adapter has
    its own (d, k) base so its rank can exceed the label alphabet.
    """

    d: int = 32
    k: int = 32
    num_classes: int = 4
    teacher_rank: int = 4
    alpha: float = 1.0
    n_train: int = 1024
    n_eval: int = 1024
    lora_alpha: float = 16.0


@dataclass
class SweepResult:
    """Flat per-cell records; one dict per (axis point, seed)."""

    axis_names: tuple[str, ...]
    rows: list[dict]

    def aggregate(self, metric: str) -> dict[tuple, tuple[float, float]]:
        """(mean, std) of ``metric`` grouped by axis values, in axis order."""
        groups: dict[tuple, list[float]] = {}
        for row in self.rows:
            key = tuple(row[a] for a in self.axis_names)
            groups.setdefault(key, []).append(row[metric])
        return {key: (float(np.mean(vs)), float(np.std(vs)))
                for key, vs in groups.items()}


def build_teacher_dataset(spec: SyntheticSpec, eta: float,
                          seed: int) -> tuple[Teacher, NoisyDataset, NoisyDataset]:
    """Teacher plus a noisy train set and a clean eval set, all seed-derived."""
    teacher = make_teacher(spec.num_classes, spec.k, spec.teacher_rank,
                           spec.alpha, derive_seed(seed, "teacher"))
    ds = sample_dataset(teacher, spec.n_train, derive_seed(seed, "data"))
    ds = inject_symmetric_noise(ds, eta, derive_seed(seed, "noise", eta))
    eval_ds = sample_dataset(teacher, spec.n_eval, derive_seed(seed, "eval"))
    return teacher, ds, eval_ds


def _fresh_model(spec: SyntheticSpec, rank: int, seed: int) -> LoraModel:
    w0 = np.zeros((spec.d, spec.k))
    model = lora_init(w0, rank, spec.lora_alpha, derive_seed(seed, "init", rank))
    model.num_classes = spec.num_classes
    return model


def memorization_sweep(ranks: list[int], noise_rates: list[float],
                       seeds: list[int], spec: SyntheticSpec,
                       cfg: TrainConfig) -> SweepResult:
    """Final train accuracy per (rank, noise rate, seed), early stopping off.

    Within one seed all ranks see the same noisy dataset, so the rank axis
    isolates capacity.
    """
    if not ranks or not noise_rates or not seeds:
        raise ArgumentError("empty sweep grid")
    rows = []
    for eta in noise_rates:
        for seed in seeds:
            _, ds, _ = build_teacher_dataset(spec, eta, seed)
            for rank in ranks:
                model = _fresh_model(spec, rank, seed)
                cell_cfg = replace(cfg, seed=derive_seed(seed, "train", rank, eta),
                                   early_stop_epoch=None)
                train(model, ds, cell_cfg)
                rows.append({"rank": rank, "noise_rate": eta, "seed": seed,
                             "final_train_acc": accuracy(model, ds.x, ds.y_observed)})
    return SweepResult(axis_names=("rank", "noise_rate"), rows=rows)


def rank_tradeoff_sweep(ranks: list[int], noise_rates: list[float],
                        seeds: list[int], spec: SyntheticSpec,
                        cfg: TrainConfig) -> SweepResult:
    """Held-out clean-label error per (rank, noise rate, seed).

    ``bias_proxy`` is the teacher's spectral tail energy beyond each rank, the
    quantity the smoothness exponent is fitted from.
    """
    if not ranks or not noise_rates or not seeds:
        raise ArgumentError("empty sweep grid")
    rows = []
    for eta in noise_rates:
        for seed in seeds:
            teacher, ds, eval_ds = build_teacher_dataset(spec, eta, seed)
            for rank in ranks:
                model = _fresh_model(spec, rank, seed)
                cell_cfg = replace(cfg, seed=derive_seed(seed, "train", rank, eta))
                train(model, ds, cell_cfg)
                err = 1.0 - accuracy(model, eval_ds.x, eval_ds.y_observed)
                rows.append({"rank": rank, "noise_rate": eta, "seed": seed,
                             "eval_err": err,
                             "bias_proxy": teacher_tail_energy(teacher, rank)})
    return SweepResult(axis_names=("rank", "noise_rate"), rows=rows)


def argmin_rank(result: SweepResult, noise_rate: float, seed: int,
                metric: str = "eval_err") -> int:
    """Rank with the smallest metric for one (noise rate, seed); ties go low."""
    best_rank, best = None, math.inf
    for row in sorted(result.rows, key=lambda r: r["rank"]):
        if row["noise_rate"] == noise_rate and row["seed"] == seed and row[metric] < best:
            best_rank, best = row["rank"], row[metric]
    if best_rank is None:
        raise ArgumentError(f"no rows for noise_rate={noise_rate}, seed={seed}")
    return best_rank

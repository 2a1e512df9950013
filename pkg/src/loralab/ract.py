"""Dual-rank training, rank-discrepancy noise detection, and clean-set
retraining.

Two adapters of different ranks train on identical data order; samples whose
high-rank loss undercuts their low-rank loss by more than a threshold are
flagged as corrupted. The oracle noise mask is consumed only by the metric
and timing diagnostics, never by parameter updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .datagen import NoisyDataset, subset
from .errors import ArgumentError, DimensionError
from .model import (LoraModel, TrainConfig, TrainHistory, Trainer, accuracy,
                    lora_init, per_sample_losses, train)
from .seeding import derive_seed
from .theory import SweepResult, SyntheticSpec, build_teacher_dataset, estimate_t_star_empirical

DEFAULT_TAU = 0.3
TAU_FLOOR = 1e-6


@dataclass
class RactConfig:
    phase1: TrainConfig
    r_low: int = 4
    r_high: int = 16
    lora_alpha: float = 16.0
    tau: float = DEFAULT_TAU
    threshold_mode: str = "fixed"        # "fixed" | "quantile"
    eta_hat: float | None = None         # required for quantile mode
    phase4_enabled: bool = False
    phase4: TrainConfig | None = None
    e1_override: int | None = None       # fixed phase-1 epochs, skips the pilot
    e1_margin: int = 5                   # epochs added to the estimated threshold
    discrepancy_window: int = 1          # trailing epochs averaged into d_i

    def __post_init__(self):
        if not 1 <= self.r_low < self.r_high:
            raise ArgumentError(f"need 1 <= r_low < r_high, got ({self.r_low}, {self.r_high})")
        if self.threshold_mode not in ("fixed", "quantile"):
            raise ArgumentError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.threshold_mode == "fixed" and self.tau <= 0:
            raise ArgumentError(f"fixed tau must be positive, got {self.tau}")
        if self.threshold_mode == "quantile" and self.eta_hat is None:
            raise ArgumentError("quantile threshold mode needs eta_hat")
        if self.phase4_enabled and self.phase4 is None:
            raise ArgumentError("phase4_enabled requires a phase4 TrainConfig")
        if self.discrepancy_window < 1:
            raise ArgumentError("discrepancy_window must be >= 1")


@dataclass
class DetectionMetrics:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


@dataclass
class RactResult:
    discrepancies: np.ndarray
    predicted_noisy: np.ndarray
    precision: float
    recall: float
    f1: float
    metrics_degenerate: bool
    n_clean: int
    n_noisy: int
    tau: float
    tau_fallback: bool
    e1: int
    t_star_high: int | None
    history_low: TrainHistory
    history_high: TrainHistory
    phase4_accuracy: float | None = None
    phase4_skipped: bool = False


def rank_discrepancy(model_low: LoraModel, model_high: LoraModel,
                     ds: NoisyDataset) -> np.ndarray:
    """Per-sample loss(high) - loss(low) against the observed labels."""
    if model_low.k != ds.k or model_high.k != ds.k:
        raise DimensionError("model input dims do not match the dataset")
    return per_sample_losses(model_high, ds) - per_sample_losses(model_low, ds)


def classify_samples(d: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices partitioned into (clean, noisy); noisy means d_i <= -tau."""
    if tau <= 0:
        raise ArgumentError(f"tau must be positive, got {tau}")
    d = np.asarray(d, dtype=np.float64)
    noisy = np.nonzero(d <= -tau)[0]
    clean = np.nonzero(d > -tau)[0]
    return clean, noisy


def auto_threshold(d: np.ndarray, eta_hat: float) -> tuple[float, bool]:
    """Threshold flagging about floor(eta_hat * n) samples.

    Returns (tau, fallback). When the discrepancies are all identical there is
    no usable order statistic and the fixed default is returned with
    fallback=True.
    """
    if not 0.0 < eta_hat < 1.0:
        raise ArgumentError(f"eta_hat must be in (0, 1), got {eta_hat}")
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise ArgumentError("empty discrepancy vector")
    if np.ptp(d) == 0.0:
        return DEFAULT_TAU, True
    m = int(math.floor(eta_hat * d.size))
    sorted_d = np.sort(d)
    if m == 0:
        tau = float(np.nextafter(-sorted_d[0], np.inf))
    else:
        tau = float(-sorted_d[m - 1])
    return max(tau, TAU_FLOOR), False


def detection_metrics(predicted_noisy: np.ndarray,
                      noise_mask: np.ndarray) -> DetectionMetrics:
    """Precision / recall / F1 of the flagged set against the oracle mask.

    Degenerate 0/0 ratios are reported as 0 with the flag set.
    """
    predicted_noisy = np.asarray(predicted_noisy, dtype=bool)
    noise_mask = np.asarray(noise_mask, dtype=bool)
    if predicted_noisy.shape != noise_mask.shape:
        raise ArgumentError(f"length mismatch: {predicted_noisy.shape} vs {noise_mask.shape}")
    tp = int(np.sum(predicted_noisy & noise_mask))
    fp = int(np.sum(predicted_noisy & ~noise_mask))
    fn = int(np.sum(~predicted_noisy & noise_mask))
    degenerate = False
    if tp + fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0.0:
        return DetectionMetrics(0.0, 0.0, 0.0, degenerate=True)
    f1 = 2.0 * precision * recall / (precision + recall)
    return DetectionMetrics(precision, recall, f1, degenerate=degenerate)


def _fresh_adapter(ds: NoisyDataset, d_out: int, rank: int, lora_alpha: float,
                   num_classes: int, seed: int) -> LoraModel:
    model = lora_init(np.zeros((d_out, ds.k)), rank, lora_alpha, seed)
    model.num_classes = num_classes
    return model


def _dual_phase1(ds: NoisyDataset, cfg: RactConfig, d_out: int, seed: int,
                 epochs: int, window: int):
    """Train both adapters in lockstep on a shared shuffle stream.

    Returns the two models, their histories, and the trailing per-sample loss
    snapshots (deque-like lists of at most ``window`` arrays).
    """
    shared = replace(cfg.phase1, epochs=epochs,
                     seed=derive_seed(seed, "phase1-data"))
    low = _fresh_adapter(ds, d_out, cfg.r_low, cfg.lora_alpha, ds.num_classes,
                         derive_seed(seed, "init-low"))
    high = _fresh_adapter(ds, d_out, cfg.r_high, cfg.lora_alpha, ds.num_classes,
                          derive_seed(seed, "init-high"))
    tr_low = Trainer(low, ds, shared)
    tr_high = Trainer(high, ds, shared)
    mask = ds.noise_mask
    hist = {name: {"clean": [], "noisy": [], "acc": []} for name in ("low", "high")}
    tail_low: list[np.ndarray] = []
    tail_high: list[np.ndarray] = []
    for _ in range(epochs):
        for name, tr in (("low", tr_low), ("high", tr_high)):
            tr.run_epoch()
            losses = tr.snapshot_losses()
            h = hist[name]
            h["clean"].append(float(losses[~mask].mean()) if (~mask).any() else math.nan)
            h["noisy"].append(float(losses[mask].mean()) if mask.any() else math.nan)
            h["acc"].append(accuracy(tr.model, ds.x, ds.y_observed))
            tail = tail_low if name == "low" else tail_high
            tail.append(losses)
            if len(tail) > window:
                tail.pop(0)

    def to_history(h) -> TrainHistory:
        return TrainHistory(clean_loss=np.array(h["clean"]),
                            noisy_loss=np.array(h["noisy"]),
                            train_acc=np.array(h["acc"]), epochs=epochs)

    return low, high, to_history(hist["low"]), to_history(hist["high"]), tail_low, tail_high


def ract_run(ds: NoisyDataset, cfg: RactConfig, seed: int,
             eval_ds: NoisyDataset | None = None,
             d_out: int | None = None) -> RactResult:
    """All four phases on an already-noisy dataset.

    Phase-1 length comes from ``cfg.e1_override`` when set; otherwise a pilot
    run of the high-rank adapter locates the onset of noise memorization and
    E1 is that epoch plus ``cfg.e1_margin`` (this estimate reads the oracle
    mask, which is why the override exists). Deterministic per (cfg, seed).
    """
    d_out = d_out if d_out is not None else max(ds.num_classes, cfg.r_high)
    if cfg.r_high > min(d_out, ds.k):
        raise ArgumentError(f"r_high={cfg.r_high} exceeds min(d_out={d_out}, k={ds.k})")

    t_hat = None
    if cfg.e1_override is not None:
        e1 = cfg.e1_override
    else:
        pilot = _fresh_adapter(ds, d_out, cfg.r_high, cfg.lora_alpha,
                               ds.num_classes, derive_seed(seed, "init-high"))
        pilot_cfg = replace(cfg.phase1, seed=derive_seed(seed, "phase1-data"))
        hist = train(pilot, ds, pilot_cfg)
        if not np.isnan(hist.noisy_loss).any():
            t_hat = estimate_t_star_empirical(hist)
        e1 = min(cfg.phase1.epochs,
                 (t_hat + cfg.e1_margin) if t_hat is not None else cfg.phase1.epochs)
        e1 = max(e1, 1)

    low, high, hist_low, hist_high, tail_low, tail_high = _dual_phase1(
        ds, cfg, d_out, seed, e1, cfg.discrepancy_window)

    d = np.mean(tail_high, axis=0) - np.mean(tail_low, axis=0)

    tau_fallback = False
    if cfg.threshold_mode == "quantile":
        tau, tau_fallback = auto_threshold(d, cfg.eta_hat)
    else:
        tau = cfg.tau
    clean_idx, noisy_idx = classify_samples(d, tau)
    predicted = np.zeros(ds.n, dtype=bool)
    predicted[noisy_idx] = True
    metrics = detection_metrics(predicted, ds.noise_mask)

    phase4_accuracy = None
    phase4_skipped = False
    if cfg.phase4_enabled:
        if len(clean_idx) == 0:
            phase4_skipped = True
        else:
            final = _fresh_adapter(ds, d_out, cfg.r_low, cfg.lora_alpha,
                                   ds.num_classes, derive_seed(seed, "init-phase4"))
            p4_cfg = replace(cfg.phase4, seed=derive_seed(seed, "phase4-data"))
            train(final, subset(ds, clean_idx), p4_cfg)
            if eval_ds is not None:
                phase4_accuracy = accuracy(final, eval_ds.x, eval_ds.y_observed)

    return RactResult(discrepancies=d, predicted_noisy=predicted,
                      precision=metrics.precision, recall=metrics.recall,
                      f1=metrics.f1, metrics_degenerate=metrics.degenerate,
                      n_clean=len(clean_idx), n_noisy=len(noisy_idx),
                      tau=tau, tau_fallback=tau_fallback, e1=e1,
                      t_star_high=t_hat,
                      history_low=hist_low, history_high=hist_high,
                      phase4_accuracy=phase4_accuracy,
                      phase4_skipped=phase4_skipped)


def threshold_sweep(d: np.ndarray, noise_mask: np.ndarray,
                    taus: list[float]) -> list[dict]:
    """Detection metrics at each threshold, one row per tau."""
    if not taus:
        raise ArgumentError("empty tau list")
    rows = []
    for tau in taus:
        _, noisy_idx = classify_samples(d, tau)
        predicted = np.zeros(len(d), dtype=bool)
        predicted[noisy_idx] = True
        m = detection_metrics(predicted, noise_mask)
        rows.append({"tau": tau, "precision": m.precision, "recall": m.recall,
                     "f1": m.f1})
    return rows


def rank_gap_sweep(pairs: list[tuple[int, int]], eta: float, seeds: list[int],
                   spec: SyntheticSpec, base_cfg: RactConfig) -> SweepResult:
    """One full RACT run per (r_low, r_high) pair per seed.

    Records the phase-4 model's clean-eval accuracy and the detection F1.
    """
    if not pairs:
        raise ArgumentError("empty pair list")
    rows = []
    for seed in seeds:
        _, ds, eval_ds = build_teacher_dataset(spec, eta, seed)
        for r_low, r_high in pairs:
            cfg = replace(base_cfg, r_low=r_low, r_high=r_high)
            res = ract_run(ds, cfg, seed, eval_ds=eval_ds, d_out=spec.d)
            rows.append({"r_low": r_low, "r_high": r_high, "seed": seed,
                         "accuracy": (res.phase4_accuracy
                                      if res.phase4_accuracy is not None else math.nan),
                         "f1": res.f1})
    return SweepResult(axis_names=("r_low", "r_high"), rows=rows)

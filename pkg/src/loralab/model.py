"""Low-rank-adapted linear predictor with closed-form gradients and a
deterministic AdamW training loop.

The predictor is logits = (W0 + (alpha/r) * B A) x with W0 frozen. The
trainable state is exactly the thin factors B (d, r) and A (r, k); B starts
at zero, so the initial model equals the frozen base map bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datagen import NoisyDataset
from .errors import ArgumentError, DimensionError, NumericError
from .numerics import (AdamWState, Matrix, Rng, adamw_step, clip_by_global_norm,
                       kaiming_uniform, softmax_cross_entropy_batch)
from .seeding import derive_seed


@dataclass
class LoraModel:
    w0: Matrix            # (d, k), frozen
    b: Matrix             # (d, r)
    a: Matrix             # (r, k)
    rank: int
    lora_alpha: float
    dropout_p: float = 0.0
    num_classes: int | None = None   # label alphabet size; defaults to d
    task: str = "classification"

    @property
    def d(self) -> int:
        return self.w0.shape[0]

    @property
    def k(self) -> int:
        return self.w0.shape[1]

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.rank

    def delta(self) -> Matrix:
        """The materialized update (alpha/r) * B A."""
        return self.scaling * (self.b @ self.a)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 42
    record_per_sample_losses: bool = False
    early_stop_epoch: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ArgumentError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class TrainHistory:
    """Per-epoch training diagnostics.

    ``noisy_loss`` entries are NaN when the dataset has no corrupted samples.
    The clean/noisy split uses the dataset's oracle mask for reporting only;
    parameter updates never see it.
    """

    clean_loss: np.ndarray
    noisy_loss: np.ndarray
    train_acc: np.ndarray
    eval_acc: np.ndarray | None = None
    per_sample_final_losses: np.ndarray | None = None
    epochs: int = 0


def lora_init(w0: Matrix, rank: int, lora_alpha: float, seed: int) -> LoraModel:
    """Fresh adapter: A ~ kaiming uniform over fan_in = k, B = 0.

    With B = 0 the delta vanishes, so predictions at init equal the frozen
    base map exactly.
    """
    d, k = w0.shape
    if not 1 <= rank <= min(d, k):
        raise ArgumentError(f"rank {rank} outside [1, {min(d, k)}] for base {w0.shape}")
    rng = Rng(seed)
    a = kaiming_uniform(rng, k, rank, k)
    b = np.zeros((d, rank))
    return LoraModel(w0=w0, b=b, a=a, rank=rank, lora_alpha=lora_alpha,
                     num_classes=d)


def forward(model: LoraModel, x: np.ndarray) -> np.ndarray:
    """Logits (length d) for a single input vector (evaluation mode)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.k,):
        raise DimensionError(f"input shaped {x.shape}, expected ({model.k},)")
    return model.w0 @ x + model.scaling * (model.b @ (model.a @ x))


def forward_batch(model: LoraModel, x: Matrix) -> Matrix:
    """Logits (n, d) for inputs (n, k), evaluation mode (no dropout)."""
    if x.shape[1] != model.k:
        raise DimensionError(f"inputs shaped {x.shape}, expected (*, {model.k})")
    return x @ model.w0.T + model.scaling * ((x @ model.a.T) @ model.b.T)


def backward(model: LoraModel, x: np.ndarray, upstream: np.ndarray) -> tuple[Matrix, Matrix]:
    """Gradients of the scalar loss wrt (B, A) given dLoss/dlogits.

    With s = alpha/r and h = A x: grad_B = s g h^T, grad_A = s (B^T g) x^T.
    W0 receives no gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if x.shape != (model.k,):
        raise DimensionError(f"input shaped {x.shape}, expected ({model.k},)")
    if g.shape != (model.d,):
        raise DimensionError(f"upstream shaped {g.shape}, expected ({model.d},)")
    s = model.scaling
    h = model.a @ x
    grad_b = s * np.outer(g, h)
    grad_a = s * np.outer(model.b.T @ g, x)
    return grad_b, grad_a


def predict(model: LoraModel, x: np.ndarray) -> int:
    """Argmax class; ties break toward the lowest index."""
    return int(np.argmax(forward(model, x)))


def predict_batch(model: LoraModel, x: Matrix) -> np.ndarray:
    return np.argmax(forward_batch(model, x), axis=1)


def accuracy(model: LoraModel, x: Matrix, labels: np.ndarray) -> float:
    """Fraction of argmax predictions equal to ``labels``."""
    if x.shape[0] != len(labels):
        raise DimensionError(f"{x.shape[0]} inputs vs {len(labels)} labels")
    return float(np.mean(predict_batch(model, x) == labels))


def per_sample_losses(model: LoraModel, ds: NoisyDataset) -> np.ndarray:
    """Per-sample loss vector in evaluation mode (no dropout)."""
    logits = forward_batch(model, ds.x)
    if model.task == "regression":
        diff = logits - ds.targets
        return np.mean(diff * diff, axis=1)
    losses, _ = softmax_cross_entropy_batch(logits, ds.y_observed)
    return losses


class Trainer:
    """Mini-batch AdamW driver advancing one epoch at a time.

    Shuffle order and dropout masks derive from cfg.seed, so two trainers
    built with the same config consume identical batch sequences (the shared
    data stream used by the dual-adapter detector).
    """

    def __init__(self, model: LoraModel, data: NoisyDataset, cfg: TrainConfig):
        if data.n < 1:
            raise ArgumentError("empty dataset")
        if data.x.shape[1] != model.k:
            raise DimensionError(f"data dim {data.x.shape[1]} != model k {model.k}")
        if model.task == "classification" and data.y_observed.max() >= model.d:
            raise DimensionError(
                f"label {int(data.y_observed.max())} outside model logit range {model.d}")
        if model.task == "regression":
            if data.targets is None:
                raise ArgumentError("regression training needs dataset targets")
            if data.targets.shape[1] != model.d:
                raise DimensionError(
                    f"target dim {data.targets.shape[1]} != model d {model.d}")
        self.model = model
        self.data = data
        self.cfg = cfg
        self.epoch = 0
        self._shuffle_rng = Rng(derive_seed(cfg.seed, "shuffle"))
        self._dropout_rng = Rng(derive_seed(cfg.seed, "dropout"))
        opt = dict(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                   clip_norm=math.inf)  # clipping is joint over (B, A), below
        self._state_b = AdamWState.for_param(model.b, **opt)
        self._state_a = AdamWState.for_param(model.a, **opt)

    def run_epoch(self) -> None:
        """One full pass over the shuffled data."""
        m, cfg = self.model, self.cfg
        order = self._shuffle_rng.gen.permutation(self.data.n)
        s = m.scaling
        p = m.dropout_p
        for start in range(0, self.data.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = self.data.x[idx]
            bs = len(idx)
            h = xb @ m.a.T
            if p > 0.0:
                keep = self._dropout_rng.gen.random((bs, m.rank)) >= p
                h = h * keep / (1.0 - p)
            logits = xb @ m.w0.T + s * (h @ m.b.T)
            if m.task == "regression":
                diff = logits - self.data.targets[idx]
                batch_loss = float(np.mean(diff * diff))
                g = 2.0 * diff / (m.d * bs)
            else:
                losses, g = softmax_cross_entropy_batch(logits, self.data.y_observed[idx])
                batch_loss = float(np.mean(losses))
                g = g / bs
            if not math.isfinite(batch_loss):
                raise NumericError(
                    f"non-finite loss at epoch {self.epoch}, batch {start // cfg.batch_size}")
            grad_b = s * (g.T @ h)
            grad_h = s * (g @ m.b)
            if p > 0.0:
                grad_h = grad_h * keep / (1.0 - p)
            grad_a = grad_h.T @ xb
            (grad_b, grad_a), _ = clip_by_global_norm([grad_b, grad_a], cfg.clip_norm)
            m.b, self._state_b = adamw_step(m.b, grad_b, self._state_b)
            m.a, self._state_a = adamw_step(m.a, grad_a, self._state_a)
        self.epoch += 1

    def snapshot_losses(self) -> np.ndarray:
        return per_sample_losses(self.model, self.data)


def train(model: LoraModel, data: NoisyDataset, cfg: TrainConfig,
          eval_data: NoisyDataset | None = None) -> TrainHistory:
    """Train the adapter in place and return per-epoch diagnostics.

    Deterministic given (model init, cfg.seed). ``eval_data`` adds a per-epoch
    accuracy series measured on its own labels.
    """
    trainer = Trainer(model, data, cfg)
    n_epochs = cfg.epochs
    if cfg.early_stop_epoch is not None:
        n_epochs = min(n_epochs, cfg.early_stop_epoch)
    clean_loss = np.zeros(n_epochs)
    noisy_loss = np.zeros(n_epochs)
    train_acc = np.full(n_epochs, math.nan)
    eval_acc = np.zeros(n_epochs) if eval_data is not None else None
    mask = data.noise_mask
    losses = None
    for e in range(n_epochs):
        trainer.run_epoch()
        losses = trainer.snapshot_losses()
        clean_loss[e] = float(losses[~mask].mean()) if (~mask).any() else math.nan
        noisy_loss[e] = float(losses[mask].mean()) if mask.any() else math.nan
        if model.task == "classification":
            train_acc[e] = accuracy(model, data.x, data.y_observed)
            if eval_data is not None:
                eval_acc[e] = accuracy(model, eval_data.x, eval_data.y_observed)
    return TrainHistory(clean_loss=clean_loss, noisy_loss=noisy_loss,
                        train_acc=train_acc, eval_acc=eval_acc,
                        per_sample_final_losses=(losses if cfg.record_per_sample_losses
                                                 else None),
                        epochs=n_epochs)

"""Dense linear algebra, deterministic RNG, losses, AdamW, and spectral utilities.

All numeric state is 64-bit float numpy arrays ("matrices" below are 2-D,
row-major). Every operation is pure given its explicit arguments; the only
mutable object is ``Rng``, which advances like any stream generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError

Matrix = np.ndarray  # 2-D float64, row-major


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

@dataclass
class Rng:
    """Deterministic random stream (PCG64, period 2^128).

    Identical seeds yield identical draw sequences within this package.
    """

    seed: int
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def gen(self) -> np.random.Generator:
        return self._gen


def gaussian(rng: Rng, rows: int, cols: int) -> Matrix:
    """Standard normal draws, shape (rows, cols)."""
    _check_shape_args(rows, cols)
    return rng.gen.standard_normal((rows, cols))


def uniform(rng: Rng, lo: float, hi: float, rows: int, cols: int) -> Matrix:
    """Uniform draws on [lo, hi), shape (rows, cols)."""
    _check_shape_args(rows, cols)
    if not lo < hi:
        raise ArgumentError(f"uniform: need lo < hi, got [{lo}, {hi})")
    return rng.gen.uniform(lo, hi, size=(rows, cols))


def shuffle(rng: Rng, indices: np.ndarray) -> np.ndarray:
    """Return a shuffled copy of ``indices``."""
    return rng.gen.permutation(indices)


def kaiming_uniform(rng: Rng, fan_in: int, rows: int, cols: int) -> Matrix:
    """Uniform on [-b, b] with b = sqrt(6 / fan_in)."""
    _check_shape_args(rows, cols)
    if fan_in < 1:
        raise ArgumentError(f"kaiming_uniform: fan_in must be >= 1, got {fan_in}")
    bound = math.sqrt(6.0 / fan_in)
    return rng.gen.uniform(-bound, bound, size=(rows, cols))


def _check_shape_args(rows: int, cols: int) -> None:
    if rows < 1 or cols < 1:
        raise ArgumentError(f"shape must be positive, got ({rows}, {cols})")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with explicit conformance check."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against a class index.

    Returns (loss, grad) where grad = softmax(logits) - onehot(label).
    Max-subtraction keeps the exponentials bounded.
    """
    logits = np.asarray(logits, dtype=np.float64)
    c = logits.shape[-1]
    if c < 2:
        raise ArgumentError(f"need at least 2 classes, got {c}")
    if not 0 <= label < c:
        raise ArgumentError(f"label {label} outside [0, {c})")
    z = logits - logits.max()
    ez = np.exp(z)
    p = ez / ez.sum()
    loss = -(z[label] - math.log(ez.sum()))
    grad = p.copy()
    grad[label] -= 1.0
    return float(loss), grad


def softmax_cross_entropy_batch(logits: Matrix, labels: np.ndarray) -> tuple[np.ndarray, Matrix]:
    """Row-wise cross-entropy for an (n, C) logit matrix.

    Returns per-sample losses (n,) and gradient rows softmax - onehot (n, C).
    """
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    p = ez / denom
    n = logits.shape[0]
    losses = -(z[np.arange(n), labels] - np.log(denom[:, 0]))
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return losses, grad


def squared_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient 2*(pred - target)/len."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ArgumentError(f"length mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    """Per-parameter AdamW accumulators and hyperparameters."""

    m: Matrix
    v: Matrix
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    learning_rate: float = 1e-3
    clip_norm: float = 1.0

    @classmethod
    def for_param(cls, param: Matrix, *, learning_rate: float = 1e-3,
                  weight_decay: float = 0.01, clip_norm: float = 1.0,
                  beta1: float = 0.9, beta2: float = 0.999,
                  epsilon: float = 1e-8) -> "AdamWState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   beta1=beta1, beta2=beta2, epsilon=epsilon,
                   weight_decay=weight_decay, learning_rate=learning_rate,
                   clip_norm=clip_norm)


def clip_by_global_norm(grads: list[Matrix], max_norm: float) -> tuple[list[Matrix], float]:
    """Scale a group of gradients so their joint L2 norm is at most max_norm.

    Returns (clipped grads, pre-clip norm).
    """
    sq = sum(float(np.sum(g * g)) for g in grads)
    norm = math.sqrt(sq)
    if math.isfinite(max_norm) and norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adamw_step(param: Matrix, grad: Matrix, state: AdamWState) -> tuple[Matrix, AdamWState]:
    """One decoupled-weight-decay AdamW update.

    Clips ``grad`` to ``state.clip_norm`` (skip by setting it to inf), then
    applies the bias-corrected moment update. Returns the new parameter and
    advanced state; inputs are not mutated.
    """
    if param.shape != grad.shape:
        raise DimensionError(f"param/grad shapes differ: {param.shape} vs {grad.shape}")
    if state.m.shape != param.shape:
        raise DimensionError(f"state shaped {state.m.shape} does not match param {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to adamw_step")

    (grad,), _ = clip_by_global_norm([grad], state.clip_norm)
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    lr = state.learning_rate
    new_param = param - lr * (m_hat / (np.sqrt(v_hat) + state.epsilon)
                              + state.weight_decay * param)
    new_state = AdamWState(m=m, v=v, step=t, beta1=state.beta1, beta2=state.beta2,
                           epsilon=state.epsilon, weight_decay=state.weight_decay,
                           learning_rate=lr, clip_norm=state.clip_norm)
    return new_param, new_state


# ---------------------------------------------------------------------------
# Spectral utilities
# ---------------------------------------------------------------------------

def top_singular_values(m: Matrix, j: int, tol: float = 1e-10,
                        max_iter: int = 1000) -> tuple[np.ndarray, bool]:
    """The j largest singular values of m, descending, via power iteration.

    Iterates on the smaller Gram matrix (m m^T or m^T m) with deflation after
    each converged value. Returns (values, converged); non-convergence yields
    the best estimates with converged=False rather than an error.
    """
    if m.ndim != 2:
        raise DimensionError(f"need a 2-D matrix, got {m.ndim}-D")
    if not 1 <= j <= min(m.shape):
        raise ArgumentError(f"j={j} outside [1, {min(m.shape)}] for shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")

    # Gram on the smaller side: eigenvalues are squared singular values.
    gram = m @ m.T if m.shape[0] <= m.shape[1] else m.T @ m
    dim = gram.shape[0]
    start_rng = Rng(0x5EED ^ (dim << 16) ^ j)

    values = np.zeros(j)
    all_converged = True
    for idx in range(j):
        vec = gaussian(start_rng, dim, 1)[:, 0]
        vec /= np.linalg.norm(vec)
        lam_prev = 0.0
        converged = False
        lam = 0.0
        for _ in range(max_iter):
            w = gram @ vec
            nw = np.linalg.norm(w)
            if nw == 0.0:  # vector in the null space: eigenvalue 0
                lam = 0.0
                converged = True
                break
            vec = w / nw
            lam = float(vec @ (gram @ vec))
            if abs(lam - lam_prev) <= tol * max(abs(lam), 1.0):
                converged = True
                break
            lam_prev = lam
        values[idx] = math.sqrt(max(lam, 0.0))
        all_converged = all_converged and converged
        gram = gram - lam * np.outer(vec, vec)
    return values, all_converged


def finite_difference_gradient(f, x: Matrix, h: float = 1e-5) -> Matrix:
    """Central-difference gradient of a scalar function of a matrix."""
    if h <= 0:
        raise ArgumentError(f"h must be positive, got {h}")
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        ij = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[ij] += h
        xm[ij] -= h
        grad[ij] = (f(xp) - f(xm)) / (2.0 * h)
    return grad

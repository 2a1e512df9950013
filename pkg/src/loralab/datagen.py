"""Synthetic teacher tasks, symmetric label-noise injection, and MNIST IDX loading.

Datasets keep the hidden clean labels and the corruption mask alongside the
observed labels; training code must only ever consume the observed labels,
the rest exists for evaluation.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError
from .numerics import Matrix, Rng, gaussian

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass(frozen=True)
class Teacher:
    """Ground-truth linear map with a prescribed power-law spectrum."""

    w_star: Matrix               # (d, k)
    intrinsic_rank: int
    smooth_alpha: float
    singular_values: np.ndarray  # descending, length intrinsic_rank


@dataclass(frozen=True)
class NoisyDataset:
    """Inputs with observed labels, hidden clean labels, and corruption mask.

    ``noise_mask[i]`` is True exactly when ``y_observed[i] != y_clean[i]``.
    For regression tasks ``targets`` holds the clean targets and the label
    arrays are unused zeros.
    """

    x: Matrix                 # (n, k)
    y_observed: np.ndarray    # (n,) int64
    y_clean: np.ndarray       # (n,) int64
    noise_mask: np.ndarray    # (n,) bool
    num_classes: int
    noise_rate: float
    task: str = "classification"
    targets: Matrix | None = None  # (n, d) for regression

    def __post_init__(self):
        n = self.x.shape[0]
        if not (len(self.y_observed) == len(self.y_clean) == len(self.noise_mask) == n):
            raise ArgumentError("dataset arrays have inconsistent lengths")
        if not np.array_equal(self.noise_mask, self.y_observed != self.y_clean):
            raise ArgumentError("noise_mask must mark exactly the flipped labels")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]


def make_teacher(d: int, k: int, intrinsic_rank: int, alpha: float, seed: int) -> Teacher:
    """Teacher W* = sum_i sigma_i u_i v_i^T with sigma_i = i^-(alpha + 1/2).

    The exponent makes the rank-r tail energy sum_{i>r} sigma_i^2 scale like
    r^(-2 alpha). Factors are orthonormalized gaussian draws.
    """
    if not 1 <= intrinsic_rank <= min(d, k):
        raise ArgumentError(f"rank {intrinsic_rank} outside [1, {min(d, k)}]")
    if alpha <= 0:
        raise ArgumentError(f"alpha must be positive, got {alpha}")
    rng = Rng(seed)
    u = _orthonormal_columns(gaussian(rng, d, intrinsic_rank))
    v = _orthonormal_columns(gaussian(rng, k, intrinsic_rank))
    sigma = np.arange(1, intrinsic_rank + 1, dtype=np.float64) ** (-(alpha + 0.5))
    w_star = (u * sigma) @ v.T
    return Teacher(w_star=w_star, intrinsic_rank=intrinsic_rank,
                   smooth_alpha=alpha, singular_values=sigma)


def _orthonormal_columns(m: Matrix) -> Matrix:
    """Gram-Schmidt on the columns of m."""
    q = m.copy()
    for j in range(q.shape[1]):
        for i in range(j):
            q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        norm = np.linalg.norm(q[:, j])
        if norm < 1e-12:
            raise ArgumentError("degenerate draw during orthonormalization")
        q[:, j] /= norm
    return q


def teacher_tail_energy(teacher: Teacher, rank: int) -> float:
    """Energy sum of squared singular values beyond ``rank``."""
    if rank < 0:
        raise ArgumentError(f"rank must be >= 0, got {rank}")
    return float(np.sum(teacher.singular_values[rank:] ** 2))


def sample_dataset(teacher: Teacher, n: int, seed: int,
                   task: str = "classification") -> NoisyDataset:
    """Draw x_i ~ N(0, I_k)/sqrt(k) and label them with the teacher.

    Classification labels are argmax(W* x) (lowest index wins ties);
    regression targets are W* x. Returned dataset is clean (eta = 0).
    """
    if n < 1:
        raise ArgumentError(f"n must be >= 1, got {n}")
    if task not in ("classification", "regression"):
        raise ArgumentError(f"unknown task {task!r}")
    k = teacher.w_star.shape[1]
    rng = Rng(seed)
    x = gaussian(rng, n, k) / math.sqrt(k)
    scores = x @ teacher.w_star.T
    if task == "regression":
        zeros = np.zeros(n, dtype=np.int64)
        return NoisyDataset(x=x, y_observed=zeros, y_clean=zeros.copy(),
                            noise_mask=np.zeros(n, dtype=bool),
                            num_classes=teacher.w_star.shape[0], noise_rate=0.0,
                            task="regression", targets=scores)
    labels = np.argmax(scores, axis=1).astype(np.int64)
    return NoisyDataset(x=x, y_observed=labels, y_clean=labels.copy(),
                        noise_mask=np.zeros(n, dtype=bool),
                        num_classes=teacher.w_star.shape[0], noise_rate=0.0)


def sample_random_label_dataset(n: int, k: int, num_classes: int, seed: int) -> NoisyDataset:
    """Gaussian inputs with uniformly random labels (the pure-memorization regime)."""
    if n < 1 or k < 1 or num_classes < 2:
        raise ArgumentError("need n >= 1, k >= 1, num_classes >= 2")
    rng = Rng(seed)
    x = gaussian(rng, n, k) / math.sqrt(k)
    labels = rng.gen.integers(0, num_classes, size=n).astype(np.int64)
    return NoisyDataset(x=x, y_observed=labels, y_clean=labels.copy(),
                        noise_mask=np.zeros(n, dtype=bool),
                        num_classes=num_classes, noise_rate=0.0)


def inject_symmetric_noise(ds: NoisyDataset, eta: float, seed: int) -> NoisyDataset:
    """Flip exactly floor(eta * n) labels, each to a uniformly random other class.

    Indices are chosen without replacement; the original dataset is untouched.
    """
    if not 0.0 <= eta < 1.0:
        raise ArgumentError(f"eta must be in [0, 1), got {eta}")
    if ds.task != "classification":
        raise ArgumentError("noise injection only applies to classification data")
    if ds.noise_mask.any():
        raise ArgumentError("dataset already contains injected noise")
    n_flip = int(math.floor(eta * ds.n))
    if n_flip == 0:
        return replace(ds, noise_rate=eta)
    if ds.num_classes < 2:
        raise ArgumentError("need at least 2 classes to flip labels")
    rng = Rng(seed)
    flip_idx = rng.gen.choice(ds.n, size=n_flip, replace=False)
    y = ds.y_observed.copy()
    # Uniform over the other C-1 classes: draw an offset in [1, C) and rotate.
    offsets = rng.gen.integers(1, ds.num_classes, size=n_flip)
    y[flip_idx] = (y[flip_idx] + offsets) % ds.num_classes
    mask = y != ds.y_clean
    return NoisyDataset(x=ds.x, y_observed=y, y_clean=ds.y_clean.copy(),
                        noise_mask=mask, num_classes=ds.num_classes,
                        noise_rate=eta)


def train_eval_split(ds: NoisyDataset, eval_fraction: float,
                     seed: int) -> tuple[NoisyDataset, NoisyDataset]:
    """Disjoint shuffled split; the eval part reverts to clean labels."""
    if not 0.0 < eval_fraction < 1.0:
        raise ArgumentError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    n_eval = int(math.floor(eval_fraction * ds.n))
    n_train = ds.n - n_eval
    if n_eval < 1 or n_train < 1:
        raise ArgumentError(f"degenerate split {n_train}/{n_eval} for n={ds.n}")
    rng = Rng(seed)
    perm = rng.gen.permutation(ds.n)
    train_idx, eval_idx = perm[:n_train], perm[n_train:]
    train = NoisyDataset(x=ds.x[train_idx], y_observed=ds.y_observed[train_idx],
                         y_clean=ds.y_clean[train_idx],
                         noise_mask=ds.noise_mask[train_idx],
                         num_classes=ds.num_classes, noise_rate=ds.noise_rate,
                         task=ds.task,
                         targets=None if ds.targets is None else ds.targets[train_idx])
    clean = ds.y_clean[eval_idx]
    eval_ds = NoisyDataset(x=ds.x[eval_idx], y_observed=clean.copy(),
                           y_clean=clean.copy(),
                           noise_mask=np.zeros(n_eval, dtype=bool),
                           num_classes=ds.num_classes, noise_rate=0.0,
                           task=ds.task,
                           targets=None if ds.targets is None else ds.targets[eval_idx])
    return train, eval_ds


def subset(ds: NoisyDataset, indices: np.ndarray) -> NoisyDataset:
    """Dataset restricted to ``indices`` (order preserved)."""
    return NoisyDataset(x=ds.x[indices], y_observed=ds.y_observed[indices],
                        y_clean=ds.y_clean[indices],
                        noise_mask=ds.noise_mask[indices],
                        num_classes=ds.num_classes, noise_rate=ds.noise_rate,
                        task=ds.task,
                        targets=None if ds.targets is None else ds.targets[indices])


# ---------------------------------------------------------------------------
# MNIST IDX format
# ---------------------------------------------------------------------------

def load_mnist_idx(images_path: str | Path, labels_path: str | Path,
                   limit: int | None = None) -> NoisyDataset:
    """Load big-endian IDX image/label files into a clean dataset.

    Pixels are scaled to [0, 1] float64 and images flattened row-major.
    Transparently decompresses gzip files. ``limit`` keeps the first samples
    in file order.
    """
    img_bytes = _read_binary(images_path)
    lab_bytes = _read_binary(labels_path)

    if len(img_bytes) < 16:
        raise FormatError(f"{images_path}: truncated header ({len(img_bytes)} bytes)")
    magic, n_img, rows, cols = struct.unpack(">IIII", img_bytes[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: expected image magic {IDX_IMAGE_MAGIC}, got {magic}")
    expected = 16 + n_img * rows * cols
    if len(img_bytes) != expected:
        raise FormatError(f"{images_path}: expected {expected} bytes, got {len(img_bytes)}")

    if len(lab_bytes) < 8:
        raise FormatError(f"{labels_path}: truncated header ({len(lab_bytes)} bytes)")
    lmagic, n_lab = struct.unpack(">II", lab_bytes[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(f"{labels_path}: expected label magic {IDX_LABEL_MAGIC}, got {lmagic}")
    if len(lab_bytes) != 8 + n_lab:
        raise FormatError(f"{labels_path}: expected {8 + n_lab} bytes, got {len(lab_bytes)}")
    if n_img != n_lab:
        raise FormatError(f"image count {n_img} != label count {n_lab}")

    n = n_img if limit is None else min(limit, n_img)
    if n < 1:
        raise ArgumentError(f"limit {limit} leaves no samples")
    pixels = np.frombuffer(img_bytes, dtype=np.uint8, count=n * rows * cols, offset=16)
    x = pixels.astype(np.float64).reshape(n, rows * cols) / 255.0
    labels = np.frombuffer(lab_bytes, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if n > 0 else 0
    return NoisyDataset(x=x, y_observed=labels, y_clean=labels.copy(),
                        noise_mask=np.zeros(n, dtype=bool),
                        num_classes=num_classes, noise_rate=0.0)


def write_mnist_idx(images: np.ndarray, labels: np.ndarray,
                    images_path: str | Path, labels_path: str | Path,
                    rows: int = 28, cols: int = 28) -> None:
    """Write uint8 images (n, rows*cols) and labels (n,) as IDX files.

    Gzip-compresses when the target filename ends in .gz. Round-trips exactly
    through :func:`load_mnist_idx`.
    """
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n = images.shape[0]
    if images.shape != (n, rows * cols):
        raise ArgumentError(f"images shaped {images.shape}, expected ({n}, {rows * cols})")
    if labels.shape != (n,):
        raise ArgumentError(f"labels shaped {labels.shape}, expected ({n},)")
    img_blob = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + images.tobytes()
    lab_blob = struct.pack(">II", IDX_LABEL_MAGIC, n) + labels.tobytes()
    _write_binary(images_path, img_blob)
    _write_binary(labels_path, lab_blob)


def _read_binary(path: str | Path) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _write_binary(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        # mtime pinned so identical content gives identical bytes
        path.write_bytes(gzip.compress(blob, mtime=0))
    else:
        path.write_bytes(blob)

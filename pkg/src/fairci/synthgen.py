"""Synthetic four-kernel image dataset.

Each 32x32 image is the sum of four isotropic Gaussian blobs centred on the
quadrant midpoints. The two diagonal blobs share peak amplitude ``sigma_a``,
the two off-diagonal blobs share peak amplitude ``sigma_b``. ``sigma_b`` is
the protected attribute, ``label`` the target.

Pixel ``(i, j)`` is evaluated at the continuous coordinate ``(i + 0.5, j + 0.5)``
so that the kernel centres (8, 24) are mirror images of each other under the
grid flips used by transposition and 90 degree rotation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError

IMAGE_SIZE = 32
KERNEL_STD = 4.0
CENTERS = (8.0, 24.0)
MAX_AMPLITUDE = 7.0
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

# label -> (low, high) support of both sigmas
SUPPORT = {0: (1.0, 4.0), 1: (3.0, 7.0)}


def _unit_blob(row_center: float, col_center: float) -> np.ndarray:
    coords = np.arange(IMAGE_SIZE, dtype=np.float64) + 0.5
    gr = np.exp(-((coords - row_center) ** 2) / (2.0 * KERNEL_STD**2))
    gc = np.exp(-((coords - col_center) ** 2) / (2.0 * KERNEL_STD**2))
    return gr[:, None] * gc[None, :]


def _basis() -> tuple[np.ndarray, np.ndarray]:
    lo, hi = CENTERS
    diag = _unit_blob(lo, lo) + _unit_blob(hi, hi)
    off = _unit_blob(lo, hi) + _unit_blob(hi, lo)
    return diag, off


_DIAG, _OFF = _basis()


def sample_sigmas(label: int, rng: np.random.Generator, size=None):
    """Draw ``(sigma_a, sigma_b)`` independently and uniformly on the label's support."""
    if label not in SUPPORT:
        raise InvalidParameterError(f"label must be 0 or 1, got {label!r}")
    lo, hi = SUPPORT[label]
    sigma_a = rng.uniform(lo, hi, size=size)
    sigma_b = rng.uniform(lo, hi, size=size)
    return sigma_a, sigma_b


def render_image(sigma_a: float, sigma_b: float) -> np.ndarray:
    """Render one 32x32 float64 image with diagonal amplitude ``sigma_a``
    and off-diagonal amplitude ``sigma_b``."""
    if not (sigma_a > 0 and sigma_b > 0):
        raise InvalidParameterError(
            f"sigmas must be positive, got sigma_a={sigma_a!r}, sigma_b={sigma_b!r}"
        )
    return sigma_a * _DIAG + sigma_b * _OFF


def render_batch(sigma_a, sigma_b) -> np.ndarray:
    sigma_a = np.asarray(sigma_a, dtype=np.float64)
    sigma_b = np.asarray(sigma_b, dtype=np.float64)
    if np.any(sigma_a <= 0) or np.any(sigma_b <= 0):
        raise InvalidParameterError("sigmas must be positive")
    return sigma_a[:, None, None] * _DIAG + sigma_b[:, None, None] * _OFF


@dataclass(frozen=True, eq=False)
class SynthDataset:
    pixels: np.ndarray  # (n, 32, 32) float32
    sigma_a: np.ndarray  # (n,) float64
    sigma_b: np.ndarray  # (n,) float64
    label: np.ndarray  # (n,) int8
    split: str
    seed: int

    def __len__(self) -> int:
        return len(self.label)

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx)
        return SynthDataset(
            pixels=self.pixels[idx],
            sigma_a=self.sigma_a[idx],
            sigma_b=self.sigma_b[idx],
            label=self.label[idx],
            split=self.split,
            seed=self.seed,
        )

    def normalized_pixels(self) -> np.ndarray:
        """Pixels scaled into [0, 1] by the maximum amplitude, as fed to the encoder."""
        return self.pixels / np.float32(MAX_AMPLITUDE)

    def equals(self, other: "SynthDataset") -> bool:
        return (
            self.split == other.split
            and self.seed == other.seed
            and np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.sigma_a, other.sigma_a)
            and np.array_equal(self.sigma_b, other.sigma_b)
            and np.array_equal(self.label, other.label)
        )


def generate_dataset(n: int, split: str, seed: int) -> SynthDataset:
    if n <= 0 or n % 2:
        raise InvalidParameterError(f"n must be a positive even integer, got {n!r}")
    if split not in SPLITS:
        raise InvalidParameterError(f"split must be one of {SPLITS}, got {split!r}")
    rng = np.random.default_rng(seed)
    half = n // 2
    a0, b0 = sample_sigmas(0, rng, size=half)
    a1, b1 = sample_sigmas(1, rng, size=half)
    sigma_a = np.concatenate([a0, a1])
    sigma_b = np.concatenate([b0, b1])
    label = np.repeat(np.array([0, 1], dtype=np.int8), half)
    order = rng.permutation(n)
    sigma_a, sigma_b, label = sigma_a[order], sigma_b[order], label[order]
    pixels = render_batch(sigma_a, sigma_b).astype(np.float32)
    return SynthDataset(pixels, sigma_a, sigma_b, label, split, int(seed))


def save_dataset(ds: SynthDataset, path) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            pixels=ds.pixels.astype(np.float32),
            sigma_a=ds.sigma_a.astype(np.float64),
            sigma_b=ds.sigma_b.astype(np.float64),
            label=ds.label.astype(np.int8),
            seed=np.int64(ds.seed),
            split=np.str_(ds.split),
            format_version=np.int64(FORMAT_VERSION),
        )
    return path


def load_dataset(path) -> SynthDataset:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format_version {version}")
        return SynthDataset(
            pixels=z["pixels"],
            sigma_a=z["sigma_a"],
            sigma_b=z["sigma_b"],
            label=z["label"],
            split=str(z["split"]),
            seed=int(z["seed"]),
        )


def bayes_accuracy(constrained: bool) -> float:
    """Reference accuracy of the threshold classifier that assigns the
    support overlap (3, 4) to label 1.

    Unconstrained, the classifier predicts 1 iff both sigmas exceed 3 and errs
    only on label-0 images with both sigmas in (3, 4). Constrained to
    ``sigma_a`` alone, it predicts 1 iff ``sigma_a > 3``.
    """
    overlap = 1.0 / 3.0  # P(sigma in (3, 4) | label 0)
    return 1.0 - 0.5 * (overlap if constrained else overlap**2)


def posterior_optimal_accuracy(constrained: bool) -> float:
    """Accuracy of the true minimum-error rule, which sends the overlap to
    label 0 because the label-0 density is higher there."""
    overlap = 1.0 / 4.0  # P(sigma in (3, 4) | label 1)
    return 1.0 - 0.5 * (overlap if constrained else overlap**2)


def simulate_threshold_accuracy(
    n: int, constrained: bool, seed: int = 0, overlap_to: int = 1
) -> float:
    """Monte-Carlo accuracy of the overlap-assignment rule on ``n`` draws."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    lo = np.where(y == 0, 1.0, 3.0)
    hi = np.where(y == 0, 4.0, 7.0)
    sa = rng.uniform(lo, hi)
    sb = rng.uniform(lo, hi)
    cut = 3.0 if overlap_to == 1 else 4.0
    if constrained:
        pred = sa > cut
    elif overlap_to == 1:
        pred = (sa > cut) & (sb > cut)
    else:
        pred = (sa > cut) | (sb > cut)
    return float(np.mean(pred == (y == 1)))

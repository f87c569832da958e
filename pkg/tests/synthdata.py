"""Synthetic image tasks shared by the trainer and acceptance tests.

Bar images: 3-channel squares with a bright horizontal or vertical bar
at a random position over Gaussian background noise. Orientation is the
label, so a small conv net can learn the task quickly, while noise keeps
it from being trivial at high noise levels.
"""

from __future__ import annotations

import numpy as np

from microvoc.augment import Dataset, Sample, mean_subtract, split_60_40
from microvoc.tensor import Tensor4


def bar_image(rng: np.random.Generator, size: int, orientation: int, *,
              noise: float, strength: float, thickness: int) -> np.ndarray:
    img = rng.normal(128.0, noise, (1, 3, size, size))
    pos = int(rng.integers(1, size - thickness - 1))
    if orientation == 0:
        img[:, :, pos:pos + thickness, :] += strength
    else:
        img[:, :, :, pos:pos + thickness] += strength
    return np.clip(img, 0.0, 255.0)


def bar_dataset(n: int = 500, size: int = 32, seed: int = 0, *,
                noise: float = 12.0, strength: float = 100.0,
                thickness: int = 4, prefix: str = "bar") -> Dataset:
    """Two classes: horizontal (0) vs vertical (1) bars."""
    rng = np.random.default_rng([seed, 0xBA5])
    samples = []
    for i in range(n):
        label = int(rng.integers(0, 2))
        img = bar_image(rng, size, label, noise=noise, strength=strength,
                        thickness=thickness)
        samples.append(Sample(Tensor4(img), label, f"{prefix}{i}"))
    return mean_subtract(split_60_40(samples, seed, ["horizontal", "vertical"]))


def fourbar_dataset(n: int = 100, size: int = 32, seed: int = 0, *,
                    noise: float = 50.0, strength: float = 55.0) -> Dataset:
    """Four classes crossing orientation with thickness (thin/thick x
    horizontal/vertical) under heavy noise. Small train splits overfit
    badly, and flips/crops preserve the labels."""
    rng = np.random.default_rng([seed, 0x4BA5])
    thickness = {0: 2, 1: 6, 2: 2, 3: 6}
    samples = []
    for i in range(n):
        label = int(rng.integers(0, 4))
        t = thickness[label]
        img = rng.normal(128.0, noise, (1, 3, size, size))
        pos = int(rng.integers(1, size - t - 1))
        if label < 2:
            img[:, :, pos:pos + t, :] += strength
        else:
            img[:, :, :, pos:pos + t] += strength
        img = np.clip(img, 0.0, 255.0)
        samples.append(Sample(Tensor4(img), label, f"fourbar{i}"))
    return mean_subtract(split_60_40(samples, seed,
                                     ["thin-h", "thick-h", "thin-v", "thick-v"]))

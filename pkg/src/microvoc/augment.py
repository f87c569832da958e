"""Dataset preprocessing and label-preserving augmentation.

The pipeline order is: resize every decoded image to the working
resolution, reduce multi-label records to one label, split 60:40 into
train/val, subtract the train split's per-channel means from both
splits. Augmentation (flip + random crops, a 5x expansion) applies to
the train split only and preserves labels.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import StateError
from .tensor import Tensor4

_STREAM_SPLIT = 0x51
_STREAM_AUG = 0x52


@dataclass
class Sample:
    image: Tensor4  # (1, 3, H, W)
    label: int
    id: str


@dataclass
class Dataset:
    samples: list[Sample]
    split: list[str]  # 'train' or 'val', aligned with samples
    channel_means: np.ndarray | None = None  # set by mean_subtract
    class_names: list[str] = field(default_factory=list)

    def train_samples(self) -> list[Sample]:
        return [s for s, tag in zip(self.samples, self.split) if tag == "train"]

    def val_samples(self) -> list[Sample]:
        return [s for s, tag in zip(self.samples, self.split) if tag == "val"]


def _id_stream(seed: int, sample_id: str) -> np.random.Generator:
    """Per-sample RNG stream, stable across runs and sample order."""
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, _STREAM_AUG, int.from_bytes(digest[:8], "little")])


def resize_to(image: Tensor4, target: tuple[int, int] = (128, 128)) -> Tensor4:
    """Bilinear resample to target (height, width), corner-aligned so a
    same-size call is the identity. Interpolation is convex, so outputs
    stay within the source value range."""
    n, c, h, w = image.dims
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target dims must be >= 1, got {target}")
    if (h, w) == (th, tw):
        return image.copy()

    def grid(out_size: int, in_size: int) -> np.ndarray:
        if out_size == 1:
            return np.zeros(1)
        return np.arange(out_size) * (in_size - 1) / (out_size - 1)

    ys = grid(th, h)
    xs = grid(tw, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(1, 1, th, 1)
    fx = (xs - x0).reshape(1, 1, 1, tw)

    d = image.data
    top = d[:, :, y0][:, :, :, x0] * (1 - fx) + d[:, :, y0][:, :, :, x1] * fx
    bot = d[:, :, y1][:, :, :, x0] * (1 - fx) + d[:, :, y1][:, :, :, x1] * fx
    out = top * (1 - fy) + bot * fy
    return Tensor4(out.astype(d.dtype, copy=False))


def hflip(image: Tensor4) -> Tensor4:
    """Mirror along the width axis: out[c, y, x] = in[c, y, W-1-x]."""
    return Tensor4(np.ascontiguousarray(image.data[:, :, :, ::-1]))


def random_crop(image: Tensor4, crop: tuple[int, int],
                rng: np.random.Generator) -> Tensor4:
    """Contiguous crop at a uniformly random valid offset."""
    n, c, h, w = image.dims
    ch, cw = crop
    if ch < 1 or cw < 1 or ch > h or cw > w:
        raise ValueError(f"crop {crop} invalid for image {h}x{w}")
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    return Tensor4(np.ascontiguousarray(image.data[:, :, oy:oy + ch, ox:ox + cw]))


def expand_x5(sample: Sample, crop: tuple[int, int],
              rng: np.random.Generator) -> list[Sample]:
    """{original, horizontal flip, 3 random crops resized back to the
    source resolution}: a 5x expansion, all with the original label."""
    h, w = sample.image.dims[2], sample.image.dims[3]
    out = [
        Sample(sample.image, sample.label, f"{sample.id}#orig"),
        Sample(hflip(sample.image), sample.label, f"{sample.id}#flip"),
    ]
    for k in range(3):
        cropped = random_crop(sample.image, crop, rng)
        out.append(Sample(resize_to(cropped, (h, w)), sample.label, f"{sample.id}#crop{k}"))
    return out


def augment_train_split(dataset: Dataset, crop: tuple[int, int], seed: int) -> Dataset:
    """Expand every train sample 5x; validation samples pass through.
    Each sample gets its own RNG stream derived from (seed, sample id)."""
    samples: list[Sample] = []
    split: list[str] = []
    for s, tag in zip(dataset.samples, dataset.split):
        if tag == "train":
            expanded = expand_x5(s, crop, _id_stream(seed, s.id))
            samples.extend(expanded)
            split.extend(["train"] * len(expanded))
        else:
            samples.append(s)
            split.append("val")
    return Dataset(samples, split, dataset.channel_means, dataset.class_names)


def split_60_40(samples: list[Sample], seed: int,
                class_names: list[str] | None = None) -> Dataset:
    """Deterministic shuffle, then the first ceil(0.6*N) samples are the
    train split and the rest validation."""
    if not samples:
        raise ValueError("cannot split an empty sample list")
    perm = np.random.default_rng([seed, _STREAM_SPLIT]).permutation(len(samples))
    shuffled = [samples[i] for i in perm]
    n_train = math.ceil(0.6 * len(samples))
    split = ["train"] * n_train + ["val"] * (len(samples) - n_train)
    return Dataset(shuffled, split, None, class_names or [])


def mean_subtract(dataset: Dataset) -> Dataset:
    """Subtract the train split's per-channel scalar means from every
    image in both splits; records the means on the dataset."""
    train = dataset.train_samples()
    if not train:
        raise StateError("cannot compute channel means: train split is empty")
    c = train[0].image.dims[1]
    sums = np.zeros(c)
    count = 0
    for s in train:
        sums += s.image.data.sum(axis=(0, 2, 3))
        count += s.image.dims[2] * s.image.dims[3]
    means = sums / count
    centered = [
        replace(s, image=Tensor4(s.image.data - means.reshape(1, c, 1, 1)))
        for s in dataset.samples
    ]
    return Dataset(centered, list(dataset.split), means, dataset.class_names)


def reduce_multilabel(labels) -> str:
    """Deterministic multi-label reduction: lexicographically smallest name."""
    labels = list(labels)
    if not labels:
        raise ValueError("label set is empty")
    return min(labels)

"""Synthetic two-class image benchmark for desk-scale robustness experiments.

Images are smooth colored fields with a bright soft-edged bar: horizontal
for class 0, vertical for class 1. Two extra ingredients make the benchmark
behave like natural data under attack and purification:

- the shape agrees with the label only with probability ``shape_reliability``
  (default 0.9), so a classifier cannot fit the training set from shape alone;
- a fixed low-amplitude pixel cue (a +-1 template scaled by ``cue_amplitude``,
  sign keyed to the label) appears on a ``cue_presence`` fraction of samples.
  It is label-consistent whenever present and sits well inside the usual
  attack budget, so empirical risk minimization leans on it, gradient attacks
  invert it, and denoising toward the image manifold washes it out - while
  the cue-free samples force the classifier to also learn the shape.

The generator is deterministic given a seed and can emit the dataset either
in memory or as a CIFAR-10-format binary archive on disk.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import SampleSet
from .seeding import numpy_rng

SIZE = 32
CHANNELS = 3


@dataclass
class SyntheticSpec:
    cue_amplitude: float = 0.012
    cue_presence: float = 0.75
    shape_reliability: float = 0.9
    shape_contrast: float = 0.35
    field_amplitude: float = 0.08
    pixel_noise: float = 0.003
    edge_width: float = 1.8  # soft-edge scale of the bars, in pixels


def _smooth_field(rng: np.random.Generator, n: int, amplitude: float) -> np.ndarray:
    """Bilinearly upsampled coarse noise grid, one per channel."""
    coarse = rng.uniform(-1.0, 1.0, size=(n, CHANNELS, 4, 4)).astype(np.float32)
    up = torch.nn.functional.interpolate(torch.from_numpy(coarse), size=(SIZE, SIZE),
                                         mode="bilinear", align_corners=True)
    return amplitude * up.numpy()


def _shape_mask(rng: np.random.Generator, is_vertical: np.ndarray,
                edge_width: float) -> np.ndarray:
    """Soft-edged bars: long axis horizontal (class 0) or vertical (class 1)."""
    n = len(is_vertical)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float32)
    cy = rng.uniform(12.0, 20.0, size=n).astype(np.float32)
    cx = rng.uniform(12.0, 20.0, size=n).astype(np.float32)
    # fixed bar size: constant edge length keeps reconstruction difficulty
    # (and so detection scores) homogeneous across images
    long_half = np.full(n, 9.5, dtype=np.float32)
    short_half = np.full(n, 3.8, dtype=np.float32)
    dy = np.abs(yy[None] - cy[:, None, None])
    dx = np.abs(xx[None] - cx[:, None, None])
    half_y = np.where(is_vertical, long_half, short_half)[:, None, None]
    half_x = np.where(is_vertical, short_half, long_half)[:, None, None]
    dist = np.maximum(dy - half_y, dx - half_x)
    return 1.0 / (1.0 + np.exp(dist / edge_width))


def cue_template(seed: int) -> np.ndarray:
    """The fixed +-1 pixel cue, shared by every sample drawn with this seed."""
    rng = numpy_rng(seed, "synthetic", "cue")
    return rng.choice([-1.0, 1.0], size=(CHANNELS, SIZE, SIZE)).astype(np.float32)


def generate(n: int, seed: int, split: str = "train",
             spec: SyntheticSpec | None = None) -> SampleSet:
    spec = spec or SyntheticSpec()
    rng = numpy_rng(seed, "synthetic", split)
    labels = rng.permutation(np.arange(n) % 2).astype(np.int64)
    base = rng.uniform(0.40, 0.50, size=(n, 1, 1, 1)).astype(np.float32)
    images = base + _smooth_field(rng, n, spec.field_amplitude)

    # shape agrees with the label only with probability shape_reliability
    agree = rng.uniform(size=n) < spec.shape_reliability
    shown = np.where(agree, labels, 1 - labels)
    mask = _shape_mask(rng, shown.astype(bool), spec.edge_width)
    images += spec.shape_contrast * mask[:, None, :, :]

    cue = cue_template(seed)
    # always cue the shape-contradicted samples: the cue is their only
    # label-consistent evidence, which is what makes classifiers lean on it
    present = ((rng.uniform(size=n) < spec.cue_presence) | ~agree).astype(np.float32)
    sign = (2.0 * labels - 1.0).astype(np.float32) * present
    images += spec.cue_amplitude * sign[:, None, None, None] * cue[None]

    images += rng.normal(0.0, spec.pixel_noise, size=images.shape).astype(np.float32)
    images = np.clip(images, 0.0, 1.0)
    return SampleSet(torch.from_numpy(images), torch.from_numpy(labels))


def write_archive(out_dir: str | Path, n_train: int, n_test: int, seed: int,
                  spec: SyntheticSpec | None = None) -> Path:
    """Write the benchmark as CIFAR-10-format binary batches (uint8)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = generate(n_train, seed, "train", spec)
    test = generate(n_test, seed, "test", spec)
    for name, ds in [("train", train), ("test", test)]:
        imgs = (ds.images.numpy() * 255.0).round().astype(np.uint8).reshape(len(ds), -1)
        labels = ds.labels.numpy().astype(np.uint8)
        records = np.concatenate([labels[:, None], imgs], axis=1)
        if name == "train":
            for i, chunk in enumerate(np.array_split(records, 5), start=1):
                (out / f"data_batch_{i}.bin").write_bytes(chunk.tobytes())
        else:
            (out / "test_batch.bin").write_bytes(records.tobytes())
    return out

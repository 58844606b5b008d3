"""Dataset ingestion, preprocessing, augmentation and federated partitioning.

Two on-disk layouts are supported: the CIFAR-10 binary batch layout and a
two-level directory tree (class-name subdirectories of image files). Loaded
images are float tensors in [0,1], shaped [C,H,W]. Partitions are disjoint
and exhaustive for every scheme and deterministic given a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import DatasetConfig, PartitionConfig
from .seeding import numpy_rng


class DataError(ValueError):
    """Unreadable, missing or structurally invalid dataset input."""


@dataclass
class Sample:
    image: torch.Tensor  # [C,H,W], values in [0,1]
    label: int


class SampleSet:
    """Ordered, immutable collection of samples backed by stacked tensors."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor):
        if images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got shape {tuple(images.shape)}")
        if len(images) != len(labels):
            raise DataError("images/labels length mismatch")
        self.images = images.float()
        self.labels = labels.long()

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, idx) -> Sample:
        return Sample(self.images[idx], int(self.labels[idx]))

    def subset(self, indices) -> "SampleSet":
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return SampleSet(self.images[idx], self.labels[idx])

    def num_classes(self) -> int:
        return int(self.labels.max().item()) + 1 if len(self) else 0

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield (images, labels) minibatches, shuffled when an rng is given."""
        order = np.arange(len(self))
        if rng is not None:
            order = rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = torch.as_tensor(order[start:start + batch_size], dtype=torch.long)
            yield self.images[idx], self.labels[idx]


@dataclass
class ClientDataset:
    samples: SampleSet
    client_id: int

    @property
    def n_i(self) -> int:
        return len(self.samples)


def _resize(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)


def _to_channels(images: torch.Tensor, channels: int) -> torch.Tensor:
    if images.shape[1] == channels:
        return images
    if images.shape[1] == 1 and channels == 3:
        return images.repeat(1, 3, 1, 1)
    if images.shape[1] == 3 and channels == 1:
        return images.mean(dim=1, keepdim=True)
    raise DataError(f"cannot map {images.shape[1]}-channel images to {channels} channels")


def _load_cifar_binary(path: Path, split: str) -> tuple[torch.Tensor, torch.Tensor]:
    names = ([f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train"
             else ["test_batch.bin"])
    files = [path / n for n in names if (path / n).exists()]
    if not files:
        # also accept a directory that only carries generic .bin batch files
        files = sorted(p for p in path.glob("*.bin")
                       if (split == "train") == ("test" not in p.name))
    if not files:
        raise DataError(f"no CIFAR-10 batch files for split '{split}' under {path}")
    images, labels = [], []
    record = 1 + 3 * 32 * 32
    for f in files:
        raw = np.frombuffer(f.read_bytes(), dtype=np.uint8)
        if len(raw) % record != 0:
            raise DataError(f"corrupt CIFAR-10 batch file: {f.name}")
        raw = raw.reshape(-1, record)
        labels.append(raw[:, 0].astype(np.int64))
        images.append(raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return (torch.from_numpy(np.concatenate(images)),
            torch.from_numpy(np.concatenate(labels)))


def _load_image_dir(path: Path, split: str, strict: bool) -> tuple[torch.Tensor, torch.Tensor]:
    from PIL import Image

    root = path / split if (path / split).is_dir() else path
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class subdirectories under {root}")
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.is_file())
        if not files:
            raise DataError(f"empty class directory: {class_dir}")
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except Exception as exc:
                if strict:
                    raise DataError(f"unreadable image file: {f}") from exc
                continue
            images.append(torch.from_numpy(arr).permute(2, 0, 1))
            labels.append(label)
    if not images:
        raise DataError(f"no samples found under {root}")
    sizes = {im.shape for im in images}
    if len(sizes) > 1:
        # resize individually before stacking
        target = max(im.shape[-1] for im in images)
        images = [F.interpolate(im[None], size=(target, target), mode="bilinear",
                                align_corners=False)[0] for im in images]
    return torch.stack(images), torch.tensor(labels, dtype=torch.long)


def load_dataset(source_path: str | Path, split: str, image_size: int,
                 channels: int = 3, strict: bool = True) -> SampleSet:
    """Load a dataset split, resized to ``image_size`` and scaled into [0,1]."""
    path = Path(source_path)
    if not path.exists():
        raise DataError(f"dataset path does not exist: {path}")
    if split not in ("train", "test"):
        raise DataError(f"unknown split: {split}")
    if any(path.glob("*.bin")):
        images, labels = _load_cifar_binary(path, split)
    else:
        images, labels = _load_image_dir(path, split, strict)
    if len(images) == 0:
        raise DataError(f"no samples found under {path}")
    images = _to_channels(_resize(images, image_size), channels)
    return SampleSet(images.clamp(0.0, 1.0), labels)


def select_classes(ds: SampleSet, classes) -> SampleSet:
    """Keep only the given classes and relabel them 0..k-1 in the given order."""
    classes = [int(c) for c in classes]
    mapping = {c: i for i, c in enumerate(classes)}
    keep = torch.isin(ds.labels, torch.tensor(classes))
    images = ds.images[keep]
    labels = torch.tensor([mapping[int(l)] for l in ds.labels[keep]], dtype=torch.long)
    return SampleSet(images, labels)


def take(ds: SampleSet, n: int | None) -> SampleSet:
    if n is None or n >= len(ds):
        return ds
    return ds.subset(np.arange(n))


def split_fraction(ds: SampleSet, fraction: float, seed: int) -> tuple[SampleSet, SampleSet]:
    """Deterministically split off a ``fraction`` of the samples (second return)."""
    rng = numpy_rng(seed, "split")
    order = rng.permutation(len(ds))
    n_second = int(round(fraction * len(ds)))
    return ds.subset(order[:len(ds) - n_second]), ds.subset(order[len(ds) - n_second:])


def partition_clients(ds: SampleSet, n_clients: int, scheme: PartitionConfig,
                      rng_seed: int) -> list[ClientDataset]:
    """Partition samples across clients: disjoint, exhaustive, seed-deterministic."""
    if n_clients < 1:
        raise DataError(f"n_clients must be >= 1, got {n_clients}")
    if n_clients > len(ds):
        raise DataError(f"{n_clients} clients exceed {len(ds)} samples")
    rng = numpy_rng(rng_seed, "partition", scheme.kind)
    if scheme.kind == "iid":
        assignments = _partition_iid(ds, n_clients, rng)
    elif scheme.kind == "label_shard":
        assignments = _partition_label_shard(ds, n_clients, int(scheme.param), rng)
    elif scheme.kind == "dirichlet":
        assignments = _partition_dirichlet(ds, n_clients, float(scheme.param), rng)
    else:
        raise DataError(f"unknown partition kind: {scheme.kind}")
    _rebalance_empty(assignments, rng)
    return [ClientDataset(ds.subset(sorted(idx)), client_id=i)
            for i, idx in enumerate(assignments)]


def _partition_iid(ds: SampleSet, n_clients: int, rng: np.random.Generator):
    order = rng.permutation(len(ds))
    return [list(chunk) for chunk in np.array_split(order, n_clients)]


def _partition_label_shard(ds: SampleSet, n_clients: int, shards_per_client: int,
                           rng: np.random.Generator):
    shards_per_client = max(1, shards_per_client)
    labels = ds.labels.numpy()
    by_label = np.argsort(labels, kind="stable")
    n_shards = n_clients * shards_per_client
    shards = np.array_split(by_label, n_shards)
    shard_order = rng.permutation(n_shards)
    assignments = [[] for _ in range(n_clients)]
    for pos, shard_id in enumerate(shard_order):
        assignments[pos % n_clients].extend(shards[shard_id].tolist())
    return assignments


def _partition_dirichlet(ds: SampleSet, n_clients: int, alpha: float,
                         rng: np.random.Generator):
    labels = ds.labels.numpy()
    assignments = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
        for client, part in enumerate(np.split(idx, cuts)):
            assignments[client].extend(part.tolist())
    return assignments


def _rebalance_empty(assignments: list[list[int]], rng: np.random.Generator) -> None:
    """Move single samples from the largest clients into empty ones."""
    while True:
        empty = [i for i, a in enumerate(assignments) if not a]
        if not empty:
            return
        donor = max(range(len(assignments)), key=lambda i: len(assignments[i]))
        if len(assignments[donor]) <= 1:
            raise DataError("cannot give every client at least one sample")
        pick = int(rng.integers(len(assignments[donor])))
        assignments[empty[0]].append(assignments[donor].pop(pick))


# training-time augmentation: mild rotations, flips and brightness shifts

ROTATION_DEG = 15.0
FLIP_PROB = 0.5
BRIGHTNESS_DELTA = 0.2


def _rotate(image: torch.Tensor, degrees: float) -> torch.Tensor:
    if degrees == 0.0:
        return image
    theta_rad = math.radians(degrees)
    cos, sin = math.cos(theta_rad), math.sin(theta_rad)
    mat = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=image.dtype)
    grid = F.affine_grid(mat[None], [1, *image.shape], align_corners=False)
    return F.grid_sample(image[None], grid, mode="bilinear", padding_mode="border",
                         align_corners=False)[0]


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Rotation in +-15 deg, horizontal flip with p=0.5, brightness shift +-0.2.

    The label and tensor shape never change and pixel values stay in [0,1].
    """
    image = sample.image
    angle = float(rng.uniform(-ROTATION_DEG, ROTATION_DEG))
    image = _rotate(image, angle)
    if float(rng.uniform()) < FLIP_PROB:
        image = torch.flip(image, dims=[-1])
    delta = float(rng.uniform(-BRIGHTNESS_DELTA, BRIGHTNESS_DELTA))
    if delta != 0.0:
        image = image + delta
    return Sample(image.clamp(0.0, 1.0), sample.label)


def augment_batch(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    out = [augment(Sample(im, 0), rng).image for im in images]
    return torch.stack(out)

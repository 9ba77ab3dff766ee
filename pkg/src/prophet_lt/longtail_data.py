"""Long-tailed dataset construction, synthetic mixtures and batch samplers.

Class sizes follow the exponential profile ``n_i = n_max * IF ** (-i / (C - 1))``
rounded half-up with a floor of one sample, so class 0 is the head and class
``C - 1`` the tail.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

SPLIT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    max_count: int
    imbalance_factor: float

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.max_count < 1:
            raise ValidationError(f"max_count must be >= 1, got {self.max_count}")
        if not self.imbalance_factor >= 1:
            raise ValidationError(
                f"imbalance_factor must be >= 1, got {self.imbalance_factor}"
            )


@dataclass(frozen=True)
class SynthMixtureSpec:
    num_classes: int
    input_dim: int
    counts: tuple
    class_separation: float = 4.0
    within_class_std: float = 1.0
    test_per_class: int = 100

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.input_dim < 1:
            raise ValidationError("input_dim must be >= 1")
        if len(self.counts) != self.num_classes:
            raise ValidationError(
                f"counts has {len(self.counts)} entries for {self.num_classes} classes"
            )
        if min(self.counts) < 1:
            raise ValidationError("every class count must be >= 1")
        if not self.class_separation > 0:
            raise ValidationError("class_separation must be > 0")
        if not self.within_class_std > 0:
            raise ValidationError("within_class_std must be > 0")
        if self.test_per_class < 1:
            raise ValidationError("test_per_class must be >= 1")


@dataclass
class DatasetSplit:
    """Inputs (N x ...) with integer labels in ``[0, num_classes)``."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.inputs = np.asarray(self.inputs)
        if self.labels.ndim != 1 or len(self.labels) != len(self.inputs):
            raise ValidationError("labels must be a vector matching the number of inputs")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, index) -> "DatasetSplit":
        return DatasetSplit(self.inputs[index], self.labels[index], self.num_classes, dict(self.meta))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def per_class_counts(spec: LongTailSpec) -> np.ndarray:
    """Exponentially decaying class sizes, head first."""
    C, n_max, imb = spec.num_classes, spec.max_count, float(spec.imbalance_factor)
    counts = [max(1, _round_half_up(n_max / imb ** (i / (C - 1)))) for i in range(C)]
    return np.asarray(counts, dtype=np.int64)


def subsample_longtail(source: DatasetSplit, spec: LongTailSpec, seed: int) -> DatasetSplit:
    """Keep a seeded uniform subset of each class so the sizes follow ``spec``."""
    if source.num_classes != spec.num_classes:
        raise ValidationError(
            f"source has {source.num_classes} classes, spec has {spec.num_classes}"
        )
    target = per_class_counts(spec)
    available = source.per_class_counts
    for i, (need, have) in enumerate(zip(target, available)):
        if have < need:
            raise ValidationError(f"class {i} has {have} samples, needs {need}")

    rng = np.random.default_rng(seed)
    keep = []
    for i, need in enumerate(target):
        idx = np.flatnonzero(source.labels == i)
        keep.append(np.sort(rng.choice(idx, size=need, replace=False)))
    keep = np.concatenate(keep)
    out = source.subset(keep)
    out.meta.update({"longtail": asdict(spec), "subsample_seed": seed})
    return out


def _class_means(C: int, D: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    # orthonormal directions when C <= D, otherwise unit-norm random directions
    g = rng.standard_normal((D, max(C, D)))
    if C <= D:
        q, _ = np.linalg.qr(g[:, :C])
        dirs = q.T
    else:
        dirs = g[:, :C].T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return separation * dirs


def make_synthetic_mixture(spec: SynthMixtureSpec, seed: int):
    """Gaussian mixture with ``spec.counts`` training samples per class and a balanced test set.

    Returns ``(train, test)``. Means are a function of the seed alone; train and
    test samples are independent draws.
    """
    rng = np.random.default_rng(seed)
    means = _class_means(spec.num_classes, spec.input_dim, spec.class_separation, rng)

    def draw(counts):
        labels = np.repeat(np.arange(spec.num_classes), counts)
        noise = rng.standard_normal((len(labels), spec.input_dim))
        return means[labels] + spec.within_class_std * noise, labels

    x_tr, y_tr = draw(np.asarray(spec.counts))
    x_te, y_te = draw(np.full(spec.num_classes, spec.test_per_class))
    meta = {"synthetic": asdict(spec), "seed": seed}
    return (
        DatasetSplit(x_tr, y_tr, spec.num_classes, dict(meta, part="train")),
        DatasetSplit(x_te, y_te, spec.num_classes, dict(meta, part="test")),
    )


class InstanceSampler:
    """Uniform shuffling over instances; one pass over the data per epoch."""

    def __init__(self, split: DatasetSplit, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if batch_size > len(split):
            raise ValidationError(
                f"batch_size {batch_size} exceeds dataset size {len(split)}"
            )
        self.split = split
        self.batch_size = batch_size
        self.seed = seed

    def epoch_indices(self, epoch: int) -> list:
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.split))
        return [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]

    def epoch(self, epoch: int):
        for idx in self.epoch_indices(epoch):
            yield self.split.inputs[idx], self.split.labels[idx]

    def __iter__(self):
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


class ClassBalancedSampler:
    """Pick a class uniformly, then an instance of it uniformly (with replacement).

    An epoch has the same number of batches as an instance-sampling epoch.
    """

    def __init__(self, split: DatasetSplit, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        counts = split.per_class_counts
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            raise ValidationError(f"class {int(empty[0])} has no samples")
        self.split = split
        self.batch_size = batch_size
        self.seed = seed
        self._members = [np.flatnonzero(split.labels == i) for i in range(split.num_classes)]
        self._counts = counts

    def epoch_indices(self, epoch: int) -> list:
        rng = np.random.default_rng([self.seed, epoch])
        n_batches = math.ceil(len(self.split) / self.batch_size)
        batches = []
        for _ in range(n_batches):
            cls = rng.integers(0, self.split.num_classes, size=self.batch_size)
            pos = (rng.random(self.batch_size) * self._counts[cls]).astype(np.int64)
            batches.append(np.array([self._members[c][p] for c, p in zip(cls, pos)]))
        return batches

    def epoch(self, epoch: int):
        for idx in self.epoch_indices(epoch):
            yield self.split.inputs[idx], self.split.labels[idx]

    def __iter__(self):
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


def instance_sampler(split: DatasetSplit, batch_size: int, seed: int) -> InstanceSampler:
    return InstanceSampler(split, batch_size, seed)


def class_balanced_sampler(split: DatasetSplit, batch_size: int, seed: int) -> ClassBalancedSampler:
    return ClassBalancedSampler(split, batch_size, seed)


def save_split(split: DatasetSplit, directory, seed=None, spec=None) -> Path:
    """Write ``manifest.json`` plus ``inputs.npy`` / ``labels.npy`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "inputs.npy", split.inputs, allow_pickle=False)
    np.save(directory / "labels.npy", split.labels, allow_pickle=False)
    manifest = {
        "format_version": SPLIT_FORMAT_VERSION,
        "num_classes": split.num_classes,
        "num_samples": len(split),
        "per_class_counts": split.per_class_counts.tolist(),
        "input_shape": list(split.inputs.shape[1:]),
        "input_dtype": str(split.inputs.dtype),
        "seed": seed,
        "spec": asdict(spec) if spec is not None else None,
        "meta": split.meta,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_split(directory) -> DatasetSplit:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != SPLIT_FORMAT_VERSION:
        raise ValidationError(
            f"unsupported split format version {manifest.get('format_version')!r}"
        )
    inputs = np.load(directory / "inputs.npy", allow_pickle=False)
    labels = np.load(directory / "labels.npy", allow_pickle=False)
    split = DatasetSplit(inputs, labels, manifest["num_classes"], manifest.get("meta") or {})
    if split.per_class_counts.tolist() != manifest["per_class_counts"]:
        raise ValidationError("per_class_counts in manifest do not match stored labels")
    return split

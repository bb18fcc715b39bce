"""Dataset loading (IDX, CIFAR binary, synthetic blobs) and label-scarce splits."""
from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class SplitError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray      # (N, H, W, C) or (N, d)
    labels: np.ndarray      # (N,)
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside 0..num_classes")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.inputs[index], self.labels[index], self.num_classes, self.name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# -- IDX ---------------------------------------------------------------------

def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def parse_idx(raw: bytes, expect_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError("truncated IDX header", 0)
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expect_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}", 0)
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise FormatError("truncated IDX dimensions", 4)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    off = 4 + 4 * ndim
    need = math.prod(dims)
    if len(raw) - off < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {len(raw) - off}", off)
    return np.frombuffer(raw, np.uint8, need, off).reshape(dims)


def encode_idx(array: np.ndarray, magic: int) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def load_idx(images_path, labels_path, name: str = "mnist", num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255 into [0, 1]."""
    images = parse_idx(_read(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images[..., None] / 255.0, labels.astype(np.int64), num_classes, name)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    pixels = np.rint(dataset.inputs[..., 0] * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(encode_idx(pixels, IDX_IMAGES_MAGIC))
    Path(labels_path).write_bytes(encode_idx(dataset.labels, IDX_LABELS_MAGIC))


def load_cifar_binary(paths, name: str = "cifar10") -> Dataset:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 CHW pixel bytes."""
    chunks = []
    for p in paths:
        raw = np.frombuffer(_read(p), np.uint8)
        if raw.size % 3073:
            raise FormatError(f"{p}: size is not a multiple of 3073", raw.size - raw.size % 3073)
        chunks.append(raw.reshape(-1, 3073))
    rec = np.concatenate(chunks)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    return Dataset(images, rec[:, 0].astype(np.int64), 10, name)


# -- synthetic ---------------------------------------------------------------

def blob_centers(classes: int, d: int, radius: float = 3.0) -> np.ndarray:
    """Class means spaced evenly on a circle in the first two axes (a line if d == 1)."""
    centers = np.zeros((classes, d))
    if d == 1:
        centers[:, 0] = radius * np.arange(classes)
    else:
        angle = 2 * np.pi * np.arange(classes) / classes
        centers[:, 0] = radius * np.cos(angle)
        centers[:, 1] = radius * np.sin(angle)
    return centers


def make_blobs(classes: int, per_class: int, d: int, spread: float, seed: int,
               radius: float = 3.0) -> Dataset:
    """Isotropic Gaussian clusters (std ``spread``) around fixed class means."""
    if classes < 2 or d < 1 or not spread > 0:
        raise ValueError("make_blobs needs classes >= 2, d >= 1 and spread > 0")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.normal(0.0, spread, size=(labels.size, d))
    return Dataset(blob_centers(classes, d, radius)[labels] + noise, labels, classes, "blobs")


# -- splits ------------------------------------------------------------------

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_subsample(dataset: Dataset, fraction: float, seed: int):
    """Per-class labelled draw of round(fraction * class size) items.

    Returns (labelled indices, unlabelled indices), both sorted.
    """
    if not 0 < fraction <= 1:
        raise SplitError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        k = round_half_up(fraction * idx.size)
        if k == 0:
            raise SplitError(f"fraction {fraction} leaves class {cls} with no labelled items")
        chosen.append(rng.choice(idx, k, replace=False))
    labelled = np.sort(np.concatenate(chosen))
    pool = np.setdiff1d(np.arange(len(dataset)), labelled)
    return labelled, pool


@dataclass
class SplitPlan:
    labeled_fraction: float
    fold_count: int
    seed: int
    folds: list[np.ndarray] = field(default_factory=list)
    mode: str = "disjoint"

    def labelled(self, fold: int) -> np.ndarray:
        return self.folds[fold]

    def unlabelled(self, fold: int, n: int) -> np.ndarray:
        return np.setdiff1d(np.arange(n), self.folds[fold])

    def to_manifest(self) -> dict:
        return {"labeled_fraction": self.labeled_fraction, "fold_count": self.fold_count,
                "seed": self.seed, "mode": self.mode,
                "folds": [f.tolist() for f in self.folds]}

    @classmethod
    def from_manifest(cls, m: dict) -> SplitPlan:
        return cls(m["labeled_fraction"], m["fold_count"], m["seed"],
                   [np.asarray(f, dtype=np.int64) for f in m["folds"]], m.get("mode", "disjoint"))


def folds(dataset: Dataset, fold_count: int, seed: int, mode: str = "disjoint") -> SplitPlan:
    """Stratified folds of the training set.

    ``disjoint`` partitions every class round-robin across folds (continuing
    the rotation from class to class so fold sizes stay within one item);
    ``independent`` makes ``fold_count`` separate stratified draws of
    1/fold_count each.
    """
    if fold_count < 1:
        raise SplitError("fold_count must be >= 1")
    counts = dataset.class_counts()
    if fold_count > counts.min():
        raise SplitError(f"fold_count {fold_count} exceeds smallest class size {counts.min()}")
    fraction = 1.0 / fold_count
    if mode == "independent":
        parts = [stratified_subsample(dataset, fraction, seed + f)[0] for f in range(fold_count)]
        return SplitPlan(fraction, fold_count, seed, parts, mode)
    if mode != "disjoint":
        raise SplitError(f"unknown fold mode {mode!r}")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(fold_count)]
    offset = 0
    for cls in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == cls))
        for j, i in enumerate(idx):
            buckets[(j + offset) % fold_count].append(int(i))
        offset += idx.size
    parts = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    return SplitPlan(fraction, fold_count, seed, parts, mode)


def write_manifest(path, plan: SplitPlan | None = None, **extra) -> None:
    body = dict(extra)
    if plan is not None:
        body.update(plan.to_manifest())
    Path(path).write_text(json.dumps(body, sort_keys=True))

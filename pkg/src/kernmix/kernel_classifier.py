"""Nearest-neighbour Gaussian kernel classifier over a bank of labelled centers."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

SMOOTHING = 1e-12
BANK_MAGIC = b"KMGK"
BANK_VERSION = 1


class EmptyClassError(ValueError):
    def __init__(self, cls: int):
        super().__init__(f"class {cls} has no samples to draw centers from")
        self.cls = cls


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 5.0
    k_neighbours: int = 50
    centers_per_class: int = 10

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.k_neighbours < 1 or self.centers_per_class < 1:
            raise ValueError("k_neighbours and centers_per_class must be >= 1")

    def k_for(self, n: int) -> int:
        return min(n, self.k_neighbours)


@dataclass
class CenterBank:
    centers: np.ndarray          # (n, d), held fixed during backward
    center_labels: np.ndarray    # (n,)
    log_weights: Tensor          # (n,), learned
    num_classes: int

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.center_labels = np.asarray(self.center_labels, dtype=np.int64)
        if not isinstance(self.log_weights, Tensor):
            self.log_weights = Tensor(self.log_weights, requires_grad=True)
        n = len(self.centers)
        if self.center_labels.shape != (n,) or self.log_weights.shape != (n,):
            raise ValueError("centers, center_labels and log_weights disagree on n")
        if n and (self.center_labels.min() < 0 or self.center_labels.max() >= self.num_classes):
            raise ValueError("center label outside 0..num_classes")
        missing = set(range(self.num_classes)) - set(self.center_labels.tolist())
        if missing:
            raise EmptyClassError(min(missing))
        if not np.isfinite(self.log_weights.data).all():
            raise ValueError("log_weights must be finite")

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights.data)

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.center_labels]

    # -- persistence -------------------------------------------------------
    def save(self, path, cfg: KernelConfig | None = None) -> None:
        path = Path(path)
        header = BANK_MAGIC + struct.pack("<4I", BANK_VERSION, self.n, self.d, self.num_classes)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.centers.astype("<f8").tobytes())
            fh.write(self.center_labels.astype("<u4").tobytes())
            fh.write(self.log_weights.data.astype("<f8").tobytes())
        if cfg is not None:
            path.with_suffix(path.suffix + ".json").write_text(json.dumps(asdict(cfg), indent=2))

    @classmethod
    def load(cls, path) -> tuple[CenterBank, KernelConfig | None]:
        path = Path(path)
        raw = path.read_bytes()
        if raw[:4] != BANK_MAGIC:
            raise ValueError(f"{path}: bad magic {raw[:4]!r}")
        version, n, d, c = struct.unpack_from("<4I", raw, 4)
        if version != BANK_VERSION:
            raise ValueError(f"{path}: unsupported bank version {version}")
        off = 20
        need = off + 8 * n * d + 4 * n + 8 * n
        if len(raw) != need:
            raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
        centers = np.frombuffer(raw, "<f8", n * d, off).reshape(n, d).astype(np.float64)
        off += 8 * n * d
        labels = np.frombuffer(raw, "<u4", n, off).astype(np.int64)
        off += 4 * n
        lw = np.frombuffer(raw, "<f8", n, off).astype(np.float64)
        sidecar = path.with_suffix(path.suffix + ".json")
        cfg = KernelConfig(**json.loads(sidecar.read_text())) if sidecar.exists() else None
        return cls(centers, labels, Tensor(lw, requires_grad=True), c), cfg


def init_centers(embeddings, labels, centers_per_class: int, seed: int,
                 num_classes: int | None = None) -> CenterBank:
    """Draw ``centers_per_class`` embeddings of every class as kernel centers.

    Sampling is without replacement, falling back to with-replacement when a
    class has fewer samples than requested. Weights start at one.
    """
    if centers_per_class < 1:
        raise ValueError("centers_per_class must be >= 1")
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings, float)
    labels = np.asarray(labels)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    rng = np.random.default_rng(seed)
    rows, lab = [], []
    for cls in range(c):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            raise EmptyClassError(cls)
        replace = idx.size < centers_per_class
        rows.append(rng.choice(idx, centers_per_class, replace=replace))
        lab.append(np.full(centers_per_class, cls))
    rows = np.concatenate(rows)
    n = rows.size
    return CenterBank(emb[rows].copy(), np.concatenate(lab),
                      Tensor(np.zeros(n), requires_grad=True), c)


def _sq_to_centers(x: np.ndarray, bank: CenterBank) -> np.ndarray:
    diff = x[:, None, :] - bank.centers[None, :, :]
    return np.einsum("mnd,mnd->mn", diff, diff)


def assign_phi(x, label: int, bank: CenterBank) -> int:
    """Index of the closest center carrying ``label`` (lowest index on ties)."""
    same = np.flatnonzero(bank.center_labels == label)
    if same.size == 0:
        raise KeyError(f"label {label} has no center in the bank")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, float).reshape(1, -1)
    d2 = _sq_to_centers(x, bank)[0, same]
    return int(same[np.argmin(d2)])


def neighbourhood(x, bank: CenterBank, k: int) -> np.ndarray:
    """Indices of the k closest centers, ascending distance, ties by index.

    ``x`` may be one vector (returns shape (k,)) or a batch (returns (B, k)).
    """
    if not 1 <= k <= bank.n:
        raise ValueError(f"k must be in 1..{bank.n}, got {k}")
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, float)
    single = arr.ndim == 1
    d2 = _sq_to_centers(arr.reshape(-1, bank.d), bank)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx[0] if single else idx


def neighbour_mask(x, bank: CenterBank, cfg: KernelConfig, neighbours=None) -> np.ndarray:
    """0/1 membership matrix (B, n) of each query's neighbourhood."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, float).reshape(-1, bank.d)
    if neighbours is None:
        neighbours = neighbourhood(arr, bank, cfg.k_for(bank.n))
    neighbours = np.asarray(neighbours).reshape(len(arr), -1)
    mask = np.zeros((len(arr), bank.n))
    np.put_along_axis(mask, neighbours, 1.0, axis=1)
    return mask


def class_probabilities(x, bank: CenterBank, cfg: KernelConfig, neighbours=None) -> Tensor:
    """Posterior over classes from weighted Gaussian responses of neighbouring centers.

    P(class i | x) is proportional to the sum, over neighbourhood centers z of
    class i, of w_z * exp(-|x - c_z|^2 / (2 sigma^2)). Responses are taken
    relative to the strongest one in each row, and every class mass gets
    ``SMOOTHING`` added before normalising.

    Pass ``neighbours`` (B, k) to hold neighbourhood membership fixed.
    Accepts a single d-vector (returns (c,)) or a (B, d) batch (returns (B, c)).
    """
    x = nx.tensor(x)
    single = x.ndim == 1
    xb = nx.reshape(x, (1, -1)) if single else x
    if xb.shape[1] != bank.d:
        raise nx.ShapeError("class_probabilities", xb.shape, bank.centers.shape)
    mask = neighbour_mask(xb, bank, cfg, neighbours)
    d2 = nx.sq_distances(xb, Tensor(bank.centers))
    logits = nx.sub(bank.log_weights, nx.scale(d2, 0.5 / cfg.sigma ** 2))
    # the strongest response is part of the graph: smoothing is applied on
    # this relative scale, so the shift does not cancel exactly
    best = np.where(mask > 0, logits.data, -np.inf).argmax(axis=1)
    top = nx.reshape(nx.pick(logits, best), (-1, 1))
    resp = nx.mul(nx.exp(nx.sub(logits, top)), mask)
    mass = nx.add(nx.matmul(resp, Tensor(bank.one_hot())), SMOOTHING)
    probs = nx.div(mass, nx.sum(mass, axis=1, keepdims=True))
    return nx.reshape(probs, (bank.num_classes,)) if single else probs


def nngk_log_probs(x, bank: CenterBank, cfg: KernelConfig, neighbours=None) -> Tensor:
    return nx.log(class_probabilities(x, bank, cfg, neighbours))


def nngk_loss(x, labels, bank: CenterBank, cfg: KernelConfig, neighbours=None) -> Tensor:
    """Mean negative log posterior of the true class over the batch."""
    x = nx.tensor(x)
    xb = nx.reshape(x, (1, -1)) if x.ndim == 1 else x
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    logp = nngk_log_probs(xb, bank, cfg, neighbours)
    return nx.neg(nx.mean(nx.pick(logp, labels)))


def predict(x, bank: CenterBank, cfg: KernelConfig) -> np.ndarray:
    probs = class_probabilities(nx.tensor(x).detach(), bank, cfg).data
    return np.argmax(probs.reshape(-1, bank.num_classes), axis=1)

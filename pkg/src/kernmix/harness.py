"""Experiment configuration, the training loop, evaluation and grid sweeps."""
from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import backbone, data
from . import numerics as nx
from .kernel_classifier import CenterBank, KernelConfig, init_centers, nngk_loss, predict
from .losses import (KERNEL_VARIANTS, MIXING_VARIANTS, LossSpec, contrastive_batch_loss,
                     mbdml1_loss, mbdml2_loss, mbdml3_loss, nca_loss, triplet_batch_loss)
from .mixup import mix_batch, mixup_loss_logits, sample_lambda

log = logging.getLogger(__name__)

DATA_ENV = "KERNMIX_DATA_DIR"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass
class TrainConfig:
    dataset: str = "blobs"
    data_dir: str = ""
    max_train: int = 0                 # 0 keeps every training item
    blob_classes: int = 4
    blob_train_per_class: int = 100
    blob_test_per_class: int = 50
    blob_dim: int = 8
    blob_spread: float = 0.75
    blob_radius: float = 3.0
    loss: LossSpec = field(default_factory=LossSpec)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    center_refresh: int = 0            # epochs between center re-draws, 0 = never
    net_spec: str = "mlp-small"
    embed_dim: int = 32
    normalize_embeddings: bool = False
    alpha_mix: float = 1.0
    filter_same_label: bool = False
    batch_size: int = 32
    epochs: int = 200
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_epoch: int = 0            # x0.1 from this epoch on, 0 = constant
    labeled_fraction: float = 0.10
    fold: int = 0
    fold_mode: str = "disjoint"
    split_seed: int = 0
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)
        if isinstance(self.kernel, dict):
            self.kernel = KernelConfig(**self.kernel)
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, epochs >= 0")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = {k: v for k, v in d["loss"].items() if v is not None}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> TrainConfig:
        return cls.from_dict(tomli.loads(text))

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_toml(Path(path).read_text())

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> TrainConfig:
        d = self.to_dict()
        for key, value in overrides.items():
            target = d
            *parents, leaf = key.split(".")
            for p in parents:
                target = target[p]
            target[leaf] = value
        return TrainConfig.from_dict(d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float | None


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    initial_accuracy: float
    epochs: list[EpochRecord] = field(default_factory=list)
    final_accuracy: float = 0.0
    wall_times: list[float] = field(default_factory=list, compare=False)

    def summary(self) -> dict:
        return {"config": self.config, "config_hash": self.config_hash, "seed": self.seed,
                "initial_accuracy": self.initial_accuracy,
                "final_accuracy": self.final_accuracy, "epochs": len(self.epochs)}

    def save(self, out_dir) -> None:
        """metrics.jsonl + summary.json are deterministic; timing.json is not."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.jsonl", "w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
        (out / "summary.json").write_text(json.dumps(self.summary(), sort_keys=True, indent=1))
        (out / "timing.json").write_text(json.dumps({"wall_times": self.wall_times}))

    @classmethod
    def load(cls, out_dir) -> RunRecord:
        out = Path(out_dir)
        s = json.loads((out / "summary.json").read_text())
        epochs = [EpochRecord(**json.loads(line))
                  for line in (out / "metrics.jsonl").read_text().splitlines() if line]
        timing = out / "timing.json"
        walls = json.loads(timing.read_text())["wall_times"] if timing.exists() else []
        return cls(s["config"], s["config_hash"], s["seed"], s["initial_accuracy"],
                   epochs, s["final_accuracy"], walls)


# -- data --------------------------------------------------------------------

def _data_root(cfg: TrainConfig) -> Path:
    root = cfg.data_dir or os.environ.get(DATA_ENV, "")
    if not root:
        raise FileNotFoundError(f"dataset {cfg.dataset!r} needs data_dir or ${DATA_ENV}")
    return Path(root)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        for base in (root, root / "mnist"):
            if (base / name).exists():
                return base / name
    raise FileNotFoundError(f"{stem} not found under {root}")


def load_datasets(cfg: TrainConfig) -> tuple[data.Dataset, data.Dataset]:
    """Return (train, test)."""
    if cfg.dataset == "blobs":
        args = (cfg.blob_classes,)
        kw = dict(d=cfg.blob_dim, spread=cfg.blob_spread, radius=cfg.blob_radius)
        train = data.make_blobs(*args, cfg.blob_train_per_class, seed=cfg.split_seed, **kw)
        test = data.make_blobs(*args, cfg.blob_test_per_class, seed=cfg.split_seed + 1, **kw)
    elif cfg.dataset == "mnist":
        root = _data_root(cfg)
        train = data.load_idx(_find(root, "train-images-idx3-ubyte"),
                              _find(root, "train-labels-idx1-ubyte"))
        test = data.load_idx(_find(root, "t10k-images-idx3-ubyte"),
                             _find(root, "t10k-labels-idx1-ubyte"))
    elif cfg.dataset == "cifar10":
        root = _data_root(cfg) / "cifar-10-batches-bin"
        train = data.load_cifar_binary([root / f"data_batch_{i}.bin" for i in range(1, 6)])
        test = data.load_cifar_binary([root / "test_batch.bin"])
    else:
        raise ValueError(f"unknown dataset {cfg.dataset!r}")
    if cfg.max_train:
        train = train.subset(np.arange(min(cfg.max_train, len(train))))
    return train, test


def labelled_indices(cfg: TrainConfig, train: data.Dataset) -> np.ndarray:
    """The labelled subset one run trains on; the rest of ``train`` is unused."""
    f = cfg.labeled_fraction
    if f == 1.0:
        return np.arange(len(train))
    count = 1.0 / f
    if abs(count - round(count)) < 1e-9:
        plan = data.folds(train, int(round(count)), cfg.split_seed, cfg.fold_mode)
        return plan.labelled(cfg.fold % plan.fold_count)
    return data.stratified_subsample(train, f, cfg.split_seed + cfg.fold)[0]


# -- training ----------------------------------------------------------------

def _rngs(seed: int):
    return [np.random.default_rng([seed, k]) for k in range(4)]


def _batch_loss(cfg, net, bank, xb, yb, mix_rng):
    variant = cfg.loss.variant
    kcfg = cfg.kernel
    mixed = None
    if variant in MIXING_VARIANTS:
        lam = sample_lambda(cfg.alpha_mix, mix_rng)
        mixed = mix_batch(xb, yb, lam, mix_rng, cfg.filter_same_label)
    if variant == "nngk":
        emb, _ = backbone.forward(net, xb)
        return nngk_loss(emb, yb, bank, kcfg)
    if variant in ("contrastive", "triplet", "nca"):
        emb, _ = backbone.forward(net, xb)
        if variant == "contrastive":
            return contrastive_batch_loss(emb, yb, cfg.loss.effective_margin)
        if variant == "triplet":
            return triplet_batch_loss(emb, yb, cfg.loss.effective_margin)
        return nca_loss(emb, yb)
    if len(mixed.source_index) == 0:
        # every pair shared a label under filtering; fall back to the clean batch
        mixed = mix_batch(xb, yb, 1.0, mix_rng)
    if variant == "mixup":
        _, logits = backbone.forward(net, mixed.mixed_inputs)
        return mixup_loss_logits(logits, mixed.labels_a, mixed.labels_b, mixed.lam)
    if variant == "mbdml1":
        emb, _ = backbone.forward(net, xb)
        _, logits = backbone.forward(net, mixed.mixed_inputs)
        return mbdml1_loss(emb, yb, logits, mixed, bank, kcfg)
    memb, _ = backbone.forward(net, mixed.mixed_inputs)
    if variant == "mbdml2":
        return mbdml2_loss(memb, mixed.labels_a, mixed.labels_b, mixed.lam, bank, kcfg)
    emb, _ = backbone.forward(net, xb)
    return mbdml3_loss(memb, mixed.labels_a, mixed.labels_b, mixed.lam, emb, yb,
                       bank, kcfg, cfg.loss.alpha)


def make_bank(cfg: TrainConfig, net, train: data.Dataset, seed: int) -> CenterBank:
    emb = backbone.embed(net, train.inputs)
    return init_centers(emb, train.labels, cfg.kernel.centers_per_class, seed,
                        num_classes=train.num_classes)


def evaluate(net, bank: CenterBank | None, cfg: KernelConfig, test: data.Dataset,
             use_logits: bool = False) -> float:
    """Percentage of test items whose arg-max class (lowest id on ties) is correct."""
    if len(test) == 0:
        raise ValueError("empty test set")
    if use_logits:
        pred = np.argmax(backbone.logits_of(net, test.inputs), axis=1)
    else:
        if bank.d != net.d:
            raise nx.ShapeError("evaluate", (net.d,), (bank.d,))
        if bank.num_classes != test.num_classes:
            raise ValueError(f"bank has {bank.num_classes} classes, test set {test.num_classes}")
        emb = backbone.embed(net, test.inputs)
        pred = np.concatenate([predict(emb[s:s + 512], bank, cfg) for s in range(0, len(emb), 512)])
    return float(100.0 * np.mean(pred == test.labels))


@dataclass
class TrainResult:
    record: RunRecord
    net: backbone.EmbeddingNet
    bank: CenterBank | None


def train(cfg: TrainConfig, datasets=None, return_artifacts: bool = False):
    """Run one configured experiment; returns its RunRecord."""
    train_all, test = datasets or load_datasets(cfg)
    labelled = train_all.subset(labelled_indices(cfg, train_all))
    init_rng, center_rng, shuffle_rng, mix_rng = _rngs(cfg.seed)
    net = backbone.build(cfg.net_spec, cfg.embed_dim, train_all.num_classes,
                         int(init_rng.integers(2**31)), input_shape=train_all.input_shape,
                         normalize=cfg.normalize_embeddings)
    center_seed = int(center_rng.integers(2**31))
    variant = cfg.loss.variant
    kernel_based = variant in KERNEL_VARIANTS
    bank = make_bank(cfg, net, labelled, center_seed) if kernel_based else None
    params = net.parameters + ([bank.log_weights] if bank is not None else [])
    opt = backbone.Optimizer(cfg.learning_rate, cfg.momentum, cfg.weight_decay)

    def accuracy() -> float:
        if variant == "mixup":
            return evaluate(net, None, cfg.kernel, test, use_logits=True)
        eval_bank = bank if kernel_based else make_bank(cfg, net, labelled, center_seed)
        return evaluate(net, eval_bank, cfg.kernel, test)

    record = RunRecord(cfg.to_dict(), cfg.config_hash(), cfg.seed, accuracy())
    record.final_accuracy = record.initial_accuracy
    n = len(labelled)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.lr_decay_epoch and epoch == cfg.lr_decay_epoch:
            opt.learning_rate *= 0.1
        if kernel_based and cfg.center_refresh and epoch > 1 and (epoch - 1) % cfg.center_refresh == 0:
            bank.centers = make_bank(cfg, net, labelled, center_seed).centers
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            if variant in ("contrastive", "triplet", "nca") and idx.size < 2:
                continue
            loss = _batch_loss(cfg, net, bank, labelled.inputs[idx], labelled.labels[idx], mix_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            nx.zero_grad(params)
            nx.backward(loss)
            backbone.step(opt, params)
            total += value * idx.size
            count += idx.size
        acc = accuracy() if (epoch % cfg.eval_every == 0 or epoch == cfg.epochs) else None
        record.epochs.append(EpochRecord(epoch, total / max(count, 1), acc))
        record.wall_times.append(time.perf_counter() - t0)
        if acc is not None:
            record.final_accuracy = acc
        log.info("epoch %d loss %.5f acc %s", epoch, total / max(count, 1), acc)
    if return_artifacts:
        return TrainResult(record, net, bank)
    return record


# -- grid --------------------------------------------------------------------

def expand_sweep(sweep: dict) -> list[tuple[dict, TrainConfig]]:
    """Cartesian product of ``axes`` times ``runs`` repetitions.

    Repetition r of the whole sweep gets seed ``seed_base + run_index`` and,
    in ``folds`` mode, fold r.
    """
    base = TrainConfig.from_dict(sweep.get("base", {}))
    axes = sweep.get("axes", {})
    runs = int(sweep.get("runs", 1))
    mode = sweep.get("run_mode", "folds")
    seed_base = int(sweep.get("seed_base", base.seed))
    if runs < 1:
        raise ValueError("sweep needs runs >= 1")
    names = list(axes)
    out = []
    run_index = 0
    for values in itertools.product(*(axes[k] for k in names)):
        cell = dict(zip(names, values))
        for r in range(runs):
            over = dict(cell, seed=seed_base + run_index)
            if mode == "folds":
                over["fold"] = r
            elif mode != "seeds":
                raise ValueError(f"unknown run_mode {mode!r}")
            out.append((cell, base.with_overrides(over)))
            run_index += 1
    if not out:
        raise ValueError("empty sweep")
    return out


def _run_safe(cfg: TrainConfig):
    try:
        return train(cfg), None
    except Exception as exc:  # grid keeps going
        return None, f"{type(exc).__name__}: {exc}"


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = list(values)
    return statistics.fmean(values), statistics.stdev(values) if len(values) > 1 else 0.0


def format_cell(values) -> str:
    m, s = mean_std(values)
    return f"{m:.2f} ± {s:.2f}"


def grid(sweep: dict, workers: int = 1):
    """Run every configuration of a sweep; returns (runs, summary rows)."""
    plan = expand_sweep(sweep)
    cfgs = [c for _, c in plan]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_safe, cfgs))
    else:
        results = [_run_safe(c) for c in cfgs]
    runs = []
    cells: dict[str, list] = {}
    for (cell, cfg), (rec, err) in zip(plan, results):
        runs.append({"cell": cell, "config_hash": cfg.config_hash(), "seed": cfg.seed,
                     "fold": cfg.fold, "record": rec, "error": err})
        cells.setdefault(json.dumps(cell, sort_keys=True), []).append(rec)
    rows = []
    for key, recs in cells.items():
        accs = [r.final_accuracy for r in recs if r is not None]
        row = {"cell": json.loads(key), "runs": len(recs), "failed": sum(r is None for r in recs)}
        if accs:
            m, s = mean_std(accs)
            row.update(mean=m, std=s, std_kind="sample", display=format_cell(accs))
        rows.append(row)
    return runs, rows


def relative_gain(baseline_acc: float, new_acc: float) -> float:
    """Percent improvement of ``new_acc`` over ``baseline_acc``."""
    if not baseline_acc > 0:
        raise ValueError(f"baseline accuracy must be positive, got {baseline_acc}")
    return 100.0 * (new_acc - baseline_acc) / baseline_acc


def sweep_from_toml(text: str) -> dict:
    return tomli.loads(text)

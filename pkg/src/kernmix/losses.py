"""Mixup-based metric-learning objectives and the pair/triplet/NCA baselines."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .kernel_classifier import CenterBank, KernelConfig, nngk_log_probs, nngk_loss
from .mixup import MixedBatch, PROB_FLOOR, mixed_nll, mixup_loss_logits
from .numerics import Tensor

VARIANTS = ("nngk", "mixup", "mbdml1", "mbdml2", "mbdml3", "contrastive", "triplet", "nca")
KERNEL_VARIANTS = ("nngk", "mbdml1", "mbdml2", "mbdml3")
MIXING_VARIANTS = ("mixup", "mbdml1", "mbdml2", "mbdml3")


@dataclass(frozen=True)
class LossSpec:
    variant: str = "mbdml1"
    alpha: float = 1.0
    margin: float | None = None   # None picks the per-variant default

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.margin is not None and self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")

    @property
    def effective_margin(self) -> float:
        if self.margin is not None:
            return self.margin
        return 1.0 if self.variant == "contrastive" else 0.05


def mbdml1_loss(embeddings, labels, logits_of_mixed, mixed: MixedBatch,
                bank: CenterBank, cfg: KernelConfig, neighbours=None) -> Tensor:
    """Kernel-classifier loss on clean embeddings plus Mixup loss on the logit head."""
    return nx.add(nngk_loss(embeddings, labels, bank, cfg, neighbours),
                  mixup_loss_logits(logits_of_mixed, mixed.labels_a, mixed.labels_b, mixed.lam))


def mbdml2_loss(mixed_embeddings, y_i, y_j, lam: float, bank: CenterBank,
                cfg: KernelConfig, neighbours=None) -> Tensor:
    """Mixed cross-entropy with kernel-classifier posteriors of mixed embeddings."""
    logp = nngk_log_probs(nx.tensor(mixed_embeddings), bank, cfg, neighbours)
    return mixed_nll(logp, y_i, y_j, lam)


def mbdml3_loss(mixed_embeddings, y_i, y_j, lam: float, embeddings, labels,
                bank: CenterBank, cfg: KernelConfig, alpha: float = 1.0,
                mixed_neighbours=None, neighbours=None) -> Tensor:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    l2 = mbdml2_loss(mixed_embeddings, y_i, y_j, lam, bank, cfg, mixed_neighbours)
    return nx.add(nx.scale(l2, alpha), nngk_loss(embeddings, labels, bank, cfg, neighbours))


# -- baselines ---------------------------------------------------------------

def contrastive_loss(a, b, same, margin: float = 1.0) -> Tensor:
    """Pairs (a[k], b[k]): d^2 when same class, max(0, margin - d)^2 otherwise."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    a, b = nx.tensor(a), nx.tensor(b)
    a = nx.reshape(a, (1, -1)) if a.ndim == 1 else a
    b = nx.reshape(b, (1, -1)) if b.ndim == 1 else b
    same = np.atleast_1d(np.asarray(same, dtype=bool)).astype(np.float64)
    diff = nx.sub(a, b)
    d2 = nx.sum(nx.mul(diff, diff), axis=1)
    # tiny offset keeps the sqrt derivative finite for coincident points
    d = nx.sqrt(nx.add(d2, 1e-18))
    hinge = nx.relu(nx.sub(margin, d))
    per_pair = nx.add(nx.mul(d2, same), nx.mul(nx.mul(hinge, hinge), 1.0 - same))
    return nx.mean(per_pair)


def contrastive_batch_loss(embeddings, labels, margin: float = 1.0) -> Tensor:
    """Contrastive loss over every unordered pair in the batch."""
    labels = np.asarray(labels)
    i, j = np.triu_indices(len(labels), k=1)
    if i.size == 0:
        raise ValueError("contrastive loss needs a batch of at least 2")
    e = nx.tensor(embeddings)
    return contrastive_loss(nx.take_rows(e, i), nx.take_rows(e, j), labels[i] == labels[j], margin)


def triplet_loss(anchor, positive, negative, margin: float = 0.05) -> Tensor:
    """mean of max(0, |a - p|^2 - |a - n|^2 + margin)."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    a, p, n = (nx.tensor(t) for t in (anchor, positive, negative))
    if a.ndim == 1:
        a, p, n = (nx.reshape(t, (1, -1)) for t in (a, p, n))
    dp, dn = nx.sub(a, p), nx.sub(a, n)
    gap = nx.sub(nx.sum(nx.mul(dp, dp), axis=1), nx.sum(nx.mul(dn, dn), axis=1))
    return nx.mean(nx.relu(nx.add(gap, margin)))


def triplet_batch_loss(embeddings, labels, margin: float = 0.05) -> Tensor:
    """Triplet loss averaged over every valid (anchor, positive, negative) in the batch."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    valid = same[:, :, None] & ~same[:, None, :]
    valid &= ~np.eye(len(labels), dtype=bool)[:, :, None]
    a, p, n = np.nonzero(valid)
    e = nx.tensor(embeddings)
    if a.size == 0:
        return nx.scale(nx.sum(e), 0.0)
    return triplet_loss(nx.take_rows(e, a), nx.take_rows(e, p), nx.take_rows(e, n), margin)


def nca_loss(embeddings, labels, return_flag: bool = False):
    """Leave-one-out soft-neighbour loss.

    p_ij = exp(-|x_i - x_j|^2) / sum_{k != i} exp(-|x_i - x_k|^2); each anchor
    contributes -ln(sum of p_ij over same-class j != i). Anchors with no
    same-class partner are skipped; if none remain the loss is 0 and a warning
    is issued (``return_flag`` also returns that condition).
    """
    x = nx.tensor(embeddings)
    labels = np.asarray(labels)
    B = len(labels)
    if B < 2:
        raise ValueError("nca loss needs a batch of at least 2")
    off = 1.0 - np.eye(B)
    same = (labels[:, None] == labels[None, :]) * off
    anchors = np.flatnonzero(same.sum(axis=1) > 0)
    if anchors.size == 0:
        warnings.warn("nca_loss: no anchor has a same-class partner; loss set to 0",
                      RuntimeWarning, stacklevel=2)
        zero = nx.scale(nx.sum(x), 0.0)
        return (zero, True) if return_flag else zero
    neg_d2 = nx.take_rows(nx.neg(nx.sq_distances(x, x)), anchors)
    # log-domain ratio: exact, and never hits the clamp while a partner exists
    log_hit = nx.sub(nx.logsumexp(neg_d2, same[anchors]), nx.logsumexp(neg_d2, off[anchors]))
    loss = nx.neg(nx.mean(nx.clamp_min(log_hit, np.log(PROB_FLOOR))))
    return (loss, False) if return_flag else loss

"""Mixed-sample construction and the mixed cross-entropy objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PROB_FLOOR = 1e-12


@dataclass
class MixedBatch:
    mixed_inputs: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    lam: float
    permutation: np.ndarray
    # rows of the source batch that were kept (all of them unless filtering)
    source_index: np.ndarray


def sample_lambda(alpha_mix: float, rng: np.random.Generator) -> float:
    """Beta(alpha, alpha) mixing factor; alpha == 0 disables mixing (returns 1)."""
    if alpha_mix < 0:
        raise ValueError(f"alpha_mix must be >= 0, got {alpha_mix}")
    if alpha_mix == 0:
        return 1.0
    return float(rng.beta(alpha_mix, alpha_mix))


def mix_batch(inputs, labels, lam: float, rng: np.random.Generator,
              filter_same_label: bool = False) -> MixedBatch:
    """Blend each item with a partner picked by a uniform random permutation.

    With ``filter_same_label`` the items whose partner shares their label are
    dropped from the mixed batch instead of being mixed.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) < 1:
        raise ValueError("cannot mix an empty batch")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    perm = rng.permutation(len(inputs))
    keep = np.arange(len(inputs))
    if filter_same_label:
        keep = keep[labels != labels[perm]]
    mixed = lam * inputs[keep] + (1.0 - lam) * inputs[perm[keep]]
    return MixedBatch(mixed, labels[keep], labels[perm[keep]], float(lam), perm, keep)


def _as_batch(probs: Tensor) -> Tensor:
    return nx.reshape(probs, (1, -1)) if probs.ndim == 1 else probs


def _targets(t, n: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    return np.broadcast_to(t, (n,))


def cross_entropy(probs, target) -> Tensor:
    """-ln p[target], averaged over rows when ``probs`` is a batch."""
    p = _as_batch(nx.tensor(probs))
    t = _targets(target, p.shape[0])
    if t.min() < 0 or t.max() >= p.shape[1]:
        raise IndexError(f"target outside 0..{p.shape[1] - 1}")
    return nx.neg(nx.mean(nx.log(nx.clamp_min(nx.pick(p, t), PROB_FLOOR))))


def mixup_loss(probs, y_i, y_j, lam: float) -> Tensor:
    """lam * CE(probs, y_i) + (1 - lam) * CE(probs, y_j)."""
    return nx.add(nx.scale(cross_entropy(probs, y_i), lam),
                  nx.scale(cross_entropy(probs, y_j), 1.0 - lam))


def mixed_nll(log_probs: Tensor, y_i, y_j, lam: float) -> Tensor:
    """Mixed negative log-likelihood on log-probabilities (batch mean)."""
    lp = _as_batch(log_probs)
    n = lp.shape[0]
    a = nx.neg(nx.mean(nx.pick(lp, _targets(y_i, n))))
    b = nx.neg(nx.mean(nx.pick(lp, _targets(y_j, n))))
    return nx.add(nx.scale(a, lam), nx.scale(b, 1.0 - lam))


def mixup_loss_logits(logits, y_i, y_j, lam: float) -> Tensor:
    """Mixup loss fused with log-softmax over classifier logits."""
    return mixed_nll(nx.log_softmax(nx.tensor(logits)), y_i, y_j, lam)

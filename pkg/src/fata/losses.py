"""Adaptation objectives.

Every loss here is gated and weighted per sample by the entropy of the
original-branch prediction: ``coef = mask * omega``, both computed on
detached values. ``reduction`` divides the gated sum either by the full batch
size (``batch_mean``) or by the number of selected samples
(``selected_mean``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .selection import LOG_EPS, SelectionConfig, entropy, select, weight
from .tensor import Tensor

REDUCTIONS = ("batch_mean", "selected_mean")


@dataclass
class LossBundle:
    l_tta: Tensor
    l_fata: Tensor
    total: Tensor
    mask: np.ndarray
    weights: np.ndarray
    entropy: np.ndarray

    def values(self) -> dict[str, float]:
        return {"l_tta": self.l_tta.item(), "l_fata": self.l_fata.item(), "total": self.total.item()}


def gate(ent_detached, cfg: SelectionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Selection mask and sample weights from a detached entropy vector."""
    ent = ent_detached.data if isinstance(ent_detached, Tensor) else np.asarray(ent_detached)
    return select(ent, cfg.e0), weight(ent, cfg.ew)


def _reduce(per_sample: Tensor, mask: np.ndarray, w: np.ndarray, reduction: str) -> Tensor:
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    n_sel = int(mask.sum())
    if n_sel == 0:
        return T.Tensor(0.0)
    coef = np.where(mask, w, 0.0)
    denom = per_sample.shape[0] if reduction == "batch_mean" else n_sel
    return T.sum_(per_sample * (coef / denom))


def entropy_min_loss(p_orig: Tensor, cfg: SelectionConfig, reduction: str = "batch_mean") -> Tensor:
    """Gated, weighted entropy of ``p_orig``; the entropy keeps its gradient."""
    ent = entropy(p_orig)
    mask, w = gate(T.stop_gradient(ent), cfg)
    return _reduce(ent, mask, w, reduction)


def cross_entropy_hard(p: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row ``-log p[label]``."""
    return -T.log(T.pick(p, labels), eps=LOG_EPS)


def fata_loss(p_aug: Tensor, pseudo: np.ndarray, ent_detached, cfg: SelectionConfig,
              reduction: str = "batch_mean") -> Tensor:
    mask, w = gate(ent_detached, cfg)
    return _reduce(cross_entropy_hard(p_aug, pseudo), mask, w, reduction)


def total_loss(l_tta, l_fata) -> Tensor:
    return T.add(l_tta, l_fata)


def simple_aug_loss(p_aug: Tensor, ent_detached, cfg: SelectionConfig,
                    reduction: str = "batch_mean") -> Tensor:
    """Entropy minimisation on the augmented branch instead of the pseudo-label CE."""
    mask, w = gate(ent_detached, cfg)
    return _reduce(entropy(p_aug), mask, w, reduction)


def mse_aug_loss(p_orig: Tensor, p_aug: Tensor, ent_detached, cfg: SelectionConfig,
                 reduction: str = "batch_mean", through_orig: bool = False) -> Tensor:
    """Mean over classes of ``(p_aug - p_orig)^2`` per sample, gated and weighted."""
    target = p_orig if through_orig else T.stop_gradient(p_orig)
    diff = p_aug - target
    mask, w = gate(ent_detached, cfg)
    return _reduce(T.mean(diff * diff, axis=-1), mask, w, reduction)


def simple_ce_loss(p_orig: Tensor, p_aug: Tensor, ent_detached, cfg: SelectionConfig,
                   reduction: str = "batch_mean") -> Tensor:
    """Soft-target CE ``-sum p_orig log p_aug`` with ``p_orig`` detached."""
    target = T.stop_gradient(p_orig)
    per_sample = -T.sum_(target * T.log(p_aug, eps=LOG_EPS), axis=-1)
    mask, w = gate(ent_detached, cfg)
    return _reduce(per_sample, mask, w, reduction)

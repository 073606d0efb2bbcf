"""Prediction entropy, entropy-gated selection and exponential sample weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_EPS = 1e-12


@dataclass
class SelectionConfig:
    """Thresholds in nats. ``None`` means the usual fraction of ``ln C``."""

    num_classes: int
    e0: float | None = None
    ew: float | None = None
    e0_frac: float = 0.5
    ew_frac: float = 0.4

    def __post_init__(self) -> None:
        log_c = math.log(self.num_classes)
        if self.e0 is None:
            self.e0 = self.e0_frac * log_c
        if self.ew is None:
            self.ew = self.ew_frac * log_c
        if not (self.e0 >= 0 and self.ew > 0):
            raise ValueError(f"thresholds must be positive, got e0={self.e0}, ew={self.ew}")


def entropy(p) -> Tensor:
    """Row-wise Shannon entropy in nats; differentiable when ``p`` is."""
    p = T.as_tensor(p)
    return -T.sum_(p * T.log(p, eps=LOG_EPS), axis=-1)


def select(ent, e0: float) -> np.ndarray:
    ent = ent.data if isinstance(ent, Tensor) else np.asarray(ent)
    return ent < e0


def weight(ent, ew: float) -> np.ndarray:
    ent = ent.data if isinstance(ent, Tensor) else np.asarray(ent)
    return np.exp(ew - ent.astype(np.float64))

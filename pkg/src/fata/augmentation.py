"""Channel-statistics feature perturbation.

Both perturbations share the form ``z' = alpha*z + d*(beta - alpha)*mu_c``
with per-(sample, channel) noise ``alpha, beta ~ Normal(1, sigma_n)`` and
``mu_c`` the spatial mean of each channel. NP+ uses the batch's normalized
variance of ``mu_c`` for ``d``; FATA uses an EMA of the normalized standard
deviation. Noise and statistics are constants for differentiation; the only
gradient path is ``alpha * z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


def channel_mean(z) -> np.ndarray:
    """[B, C] spatial mean of each channel (2-D inputs are returned as-is)."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    if z.ndim < 2:
        raise T.ShapeError("channel_mean", z.shape, detail="need at least [B, C]")
    if z.ndim == 2:
        return z.copy()
    return z.reshape(z.shape[0], z.shape[1], -1).mean(axis=2)


def _normalize_by_max(v: np.ndarray) -> np.ndarray:
    top = v.max() if v.size else 0.0
    if not top > 0:
        return np.zeros_like(v)
    return np.clip(v / top, 0.0, 1.0)


def delta_sigma(mu_c: np.ndarray) -> np.ndarray:
    """Per-channel std of ``mu_c`` over the batch axis, divided by its max.

    All zeros when the spread vanishes, which includes a batch of one.
    """
    return _normalize_by_max(np.asarray(mu_c, dtype=np.float64).std(axis=0))


def normalized_variance(mu_c: np.ndarray) -> np.ndarray:
    """NP+ scaling: per-channel variance of ``mu_c`` over the batch, divided by its max."""
    return _normalize_by_max(np.asarray(mu_c, dtype=np.float64).var(axis=0))


def sample_noise(
    rng: np.random.Generator, batch: int, channels: int, sigma_n: float
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``alpha`` then ``beta``, each [B, C] from Normal(1, sigma_n)."""
    alpha = rng.normal(1.0, sigma_n, size=(batch, channels))
    beta = rng.normal(1.0, sigma_n, size=(batch, channels))
    return alpha, beta


def perturb(z, scale: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> Tensor:
    """``alpha*z + scale*(beta - alpha)*mu_c`` with noise and ``mu_c`` detached."""
    z = T.as_tensor(z)
    mu_c = channel_mean(z)
    tail = (1,) * (z.ndim - 2)
    a = alpha.reshape(alpha.shape + tail)
    shift = (np.asarray(scale)[None, :] * (beta - alpha) * mu_c).reshape(mu_c.shape + tail)
    return z * a + shift


def np_plus(z, delta: np.ndarray, sigma_n: float, rng: np.random.Generator,
            noise: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    z = T.as_tensor(z)
    if noise is None:
        noise = sample_noise(rng, z.shape[0], z.shape[1], sigma_n)
    return perturb(z, delta, *noise)


@dataclass
class AugState:
    """EMA of the normalized channel-mean spread plus the noise stream.

    ``ema_source`` picks which rows of ``mu_c`` feed the EMA: ``all`` rows of
    every batch, or only the ``selected`` ones.
    """

    channels: int
    lambda_ema: float = 0.95
    sigma_n: float = 1.0
    seed: int | np.random.SeedSequence = 0
    ema_source: str = "all"
    delta_bar: np.ndarray = field(default=None)
    initialized: bool = False
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_ema <= 1.0:
            raise ValueError("lambda_ema must lie in [0, 1]")
        if self.sigma_n < 0:
            raise ValueError("sigma_n must be >= 0")
        if self.ema_source not in ("all", "selected"):
            raise ValueError("ema_source must be 'all' or 'selected'")
        if self.delta_bar is None:
            self.delta_bar = np.zeros(self.channels)
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "lambda_ema": self.lambda_ema,
            "sigma_n": self.sigma_n,
            "ema_source": self.ema_source,
            "delta_bar": [float(v) for v in self.delta_bar],
            "initialized": self.initialized,
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugState":
        state = cls(
            channels=d["channels"],
            lambda_ema=d["lambda_ema"],
            sigma_n=d["sigma_n"],
            ema_source=d.get("ema_source", "all"),
            delta_bar=np.asarray(d["delta_bar"], dtype=np.float64),
            initialized=d["initialized"],
        )
        state.rng.bit_generator.state = d["rng_state"]
        return state


def ema_update(state: AugState, d_sigma: np.ndarray) -> AugState:
    d_sigma = np.asarray(d_sigma, dtype=np.float64)
    if d_sigma.shape != state.delta_bar.shape:
        raise T.ShapeError("ema_update", d_sigma.shape, state.delta_bar.shape)
    if not state.initialized:
        state.delta_bar = d_sigma.copy()
        state.initialized = True
    else:
        lam = state.lambda_ema
        state.delta_bar = lam * state.delta_bar + (1.0 - lam) * d_sigma
    return state


def fata_augment(z, state: AugState,
                 noise: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Perturb ``z`` using the tracked ``delta_bar`` (zeros before the first update)."""
    z = T.as_tensor(z)
    if z.shape[1] != state.channels:
        raise T.ShapeError("fata_augment", z.shape, (state.channels,))
    if noise is None:
        noise = sample_noise(state.rng, z.shape[0], z.shape[1], state.sigma_n)
    return perturb(z, state.delta_bar, *noise)

"""The fixed-SNR latent channel and the dithered scalar quantizer that replaces it.

Training passes encoder outputs through ``z = y + eps`` with
``eps ~ N(0, sigma_eps2 I)``. With unit-variance latents the rate across the
channel is ``(d / 2) log2(1 / sigma_eps2)`` bits per image. At deployment the
noise is swapped for a uniform quantizer of step ``sqrt(12 sigma_eps2)``, whose
error has the same variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .errors import DomainError, ShapeError


def rate_to_sigma2(rate_bpi: float, d: int) -> float:
    if d <= 0:
        raise DomainError(f"latent dimensionality must be positive, got {d}")
    if rate_bpi < 0:
        raise DomainError(f"rate must be non-negative, got {rate_bpi}")
    return 4.0 ** (-rate_bpi / d)


def sigma2_to_rate(sigma_eps2: float, d: int) -> float:
    if d <= 0:
        raise DomainError(f"latent dimensionality must be positive, got {d}")
    if not 0.0 < sigma_eps2 <= 1.0:
        raise DomainError(f"noise variance must lie in (0, 1], got {sigma_eps2}")
    return 0.5 * d * -math.log2(sigma_eps2)


@dataclass(frozen=True)
class ChannelSpec:
    d: int
    sigma_eps2: float
    rate_bpi: float

    def __post_init__(self):
        # recompute the dependent field so the pair can never disagree
        object.__setattr__(self, "rate_bpi", sigma2_to_rate(self.sigma_eps2, self.d))

    @classmethod
    def from_rate(cls, rate_bpi: float, d: int) -> "ChannelSpec":
        return cls(d, rate_to_sigma2(rate_bpi, d), rate_bpi)

    @classmethod
    def from_sigma2(cls, sigma_eps2: float, d: int) -> "ChannelSpec":
        return cls(d, sigma_eps2, 0.0)

    @property
    def sigma_eps(self) -> float:
        return math.sqrt(self.sigma_eps2)


def add_channel_noise(y, sigma: float, rng: Rng) -> Tensor:
    """``y + sigma * n`` with ``n`` standard normal and held constant in the graph."""
    y = ad.as_tensor(y)
    return ad.add(y, ad.sample_normal(rng, y.shape, 0.0, sigma))


def apply_noise_channel(y, spec: ChannelSpec, rng: Rng) -> Tensor:
    y = ad.as_tensor(y)
    if y.data.ndim != 2 or y.shape[1] != spec.d:
        raise ShapeError(f"channel expects {spec.d} latent columns, got shape {y.shape}")
    return add_channel_noise(y, spec.sigma_eps, rng)


@dataclass(frozen=True)
class QuantizerSpec:
    step: float
    dither: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.step > 0:
            raise DomainError(f"quantizer step must be positive, got {self.step}")


def make_quantizer(spec: ChannelSpec, dither: bool = True, seed: int = 0) -> QuantizerSpec:
    if spec.sigma_eps2 <= 0:
        raise DomainError("a noiseless channel has no finite-rate quantizer")
    return QuantizerSpec(math.sqrt(12.0 * spec.sigma_eps2), dither, int(seed) & 0xFFFFFFFFFFFFFFFF)


def dither_offsets(q: QuantizerSpec, count: int, d: int) -> np.ndarray:
    """Per-image, per-dimension offsets in ``[-step/2, step/2)``; row ``k`` serves image ``k``.

    Both ends regenerate the same offsets from the shared seed.
    """
    if not q.dither:
        return np.zeros((count, d))
    return (Rng(q.seed).random((count, d)) - 0.5) * q.step


def quantize(y, q: QuantizerSpec) -> np.ndarray:
    """Lattice indices ``floor((y + u) / step + 1/2)`` for a vector or a batch of rows."""
    y = np.asarray(y, dtype=np.float64)
    rows = np.atleast_2d(y)
    if not np.all(np.isfinite(rows)):
        raise DomainError("cannot quantize non-finite latents")
    u = dither_offsets(q, rows.shape[0], rows.shape[1])
    idx = np.floor((rows + u) / q.step + 0.5).astype(np.int64)
    return idx.reshape(y.shape)


def dequantize(indices, q: QuantizerSpec) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    rows = np.atleast_2d(indices)
    u = dither_offsets(q, rows.shape[0], rows.shape[1])
    return (rows * q.step - u).reshape(indices.shape)

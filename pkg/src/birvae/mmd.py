"""Gaussian-kernel maximum mean discrepancy, differentiable in the first sample set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class KernelSpec:
    sigma_k: float = 1.0

    def __post_init__(self):
        if not self.sigma_k > 0:
            raise DomainError(f"kernel bandwidth must be positive, got {self.sigma_k}")


DEFAULT_KERNEL = KernelSpec()


def gaussian_kernel(x, x2, spec: KernelSpec = DEFAULT_KERNEL) -> float:
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape != x2.shape:
        raise ShapeError(f"kernel arguments differ in dimension: {x.shape} vs {x2.shape}")
    d = x - x2
    return float(np.exp(-np.dot(d, d) / (2.0 * spec.sigma_k ** 2)))


def _gram_mean(a, b, spec: KernelSpec) -> Tensor:
    scale = -1.0 / (2.0 * spec.sigma_k ** 2)
    return ad.mean_all(ad.exp(ad.mul(ad.pairwise_sqdist(a, b), scale)))


def mmd2(xs, ys, spec: KernelSpec = DEFAULT_KERNEL) -> Tensor:
    """Biased (V-statistic) squared MMD between two sample sets.

    Diagonal kernel terms are kept, which makes the estimate non-negative.
    """
    xs, ys = ad.as_tensor(xs), ad.as_tensor(ys)
    if xs.data.ndim != 2 or ys.data.ndim != 2:
        raise ShapeError(f"mmd2 expects 2-d sample matrices, got {xs.shape} and {ys.shape}")
    if xs.shape[0] < 1 or ys.shape[0] < 1:
        raise DomainError("mmd2 needs at least one sample on each side")
    if xs.shape[1] != ys.shape[1]:
        raise ShapeError(f"mmd2 sample widths differ: {xs.shape} vs {ys.shape}")
    kxx = _gram_mean(xs, xs, spec)
    kyy = _gram_mean(ys, ys, spec)
    kxy = _gram_mean(xs, ys, spec)
    return ad.sub(ad.add(kxx, kyy), ad.mul(kxy, 2.0))


def mmd_to_standard_normal(zs, rng: Rng, spec: KernelSpec = DEFAULT_KERNEL) -> Tensor:
    """MMD^2 between ``zs`` and a fresh N(0, I) draw of the same size."""
    zs = ad.as_tensor(zs)
    if zs.data.ndim != 2 or zs.shape[0] < 2:
        raise DomainError(f"need at least two latent rows, got shape {zs.shape}")
    prior = ad.sample_normal(rng, zs.shape)
    return mmd2(zs, prior, spec)


def null_mmd2(n: int, d: int, rng: Rng, pairs: int = 100,
              spec: KernelSpec = DEFAULT_KERNEL) -> np.ndarray:
    """MMD^2 between independent N(0, I) sample pairs of size ``n``; the null distribution."""
    out = np.empty(pairs)
    for i in range(pairs):
        a = rng.standard_normal((n, d))
        b = rng.standard_normal((n, d))
        out[i] = mmd2(a, b, spec).item()
    return out

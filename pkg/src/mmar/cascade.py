"""Binary lognormal multiplier cascade for multifractal trading time.

Each level-k cell of a dyadic tree receives a multiplier ``m = 2**(-V)`` with
``V ~ Normal(lam, 2 (lam - 1) / ln 2)``.  The trading-time increment of clock
period ``t`` is the product of the multipliers of the cells containing ``t``,
normalized so that the increments sum to the sample length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .series import SeedSpec

__all__ = [
    "CascadeParams",
    "DeformationIncrements",
    "multiplier_variance",
    "draw_multiplier",
    "draw_multiplier_levels",
    "cascade_products",
    "build_cascade_dyadic",
    "build_cascade",
    "window_offset",
    "CASCADE_STREAM",
]

# sub-stream of a SeedSpec reserved for cascade draws; level k uses
# (CASCADE_STREAM, k), the window offset uses (CASCADE_STREAM, 0)
CASCADE_STREAM = 0


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not np.isfinite(lam) or lam < 1.0:
        raise ValueError(f"lambda must be >= 1, got {lam!r}")
    return lam


def multiplier_variance(lam: float) -> float:
    """Variance of ``-log2 m``: ``2 (lam - 1) / ln 2``."""
    return 2.0 * (_check_lambda(lam) - 1.0) / np.log(2.0)


@dataclass(frozen=True)
class CascadeParams:
    lam: float
    T: int

    def __post_init__(self):
        object.__setattr__(self, "lam", _check_lambda(self.lam))
        if int(self.T) != self.T or self.T < 2:
            raise ValueError(f"T must be an integer >= 2, got {self.T!r}")
        object.__setattr__(self, "T", int(self.T))

    @property
    def sigma2(self) -> float:
        return multiplier_variance(self.lam)


@dataclass(frozen=True)
class DeformationIncrements:
    """Positive trading-time increments summing to their count."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("increments must be a non-empty 1-d sequence")
        if not np.all(v > 0) or not np.all(np.isfinite(v)):
            raise ValueError("increments must be finite and strictly positive")
        if abs(v.sum() - v.size) > 1e-9 * v.size:
            raise ValueError("increments do not sum to their length")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def draw_multiplier(lam: float, rng: np.random.Generator, size=None):
    """Draw lognormal multiplier(s) ``2**(-V)``, ``V ~ N(lam, 2(lam-1)/ln 2)``."""
    sd = np.sqrt(multiplier_variance(lam))
    v = lam + sd * rng.standard_normal(size)
    return np.exp2(-v)


def draw_multiplier_levels(lam: float, K: int, seed: SeedSpec) -> list:
    """Multipliers for levels 1..K; level k holds ``2**k`` cells."""
    return [
        draw_multiplier(lam, seed.generator(CASCADE_STREAM, k), 2**k)
        for k in range(1, K + 1)
    ]


def cascade_products(levels: Sequence[np.ndarray]) -> np.ndarray:
    """Unnormalized per-period products over a full dyadic tree.

    ``levels[k-1]`` must have ``2**k`` entries.  Returns ``2**K`` products.
    """
    K = len(levels)
    prod = np.ones(2**K)
    for k, m in enumerate(levels, start=1):
        m = np.asarray(m, dtype=float)
        if m.shape != (2**k,):
            raise ValueError(f"level {k} must hold {2**k} multipliers, got {m.shape}")
        prod *= np.repeat(m, 2 ** (K - k))
    return prod


def _normalize(prod: np.ndarray) -> np.ndarray:
    return prod * (prod.size / prod.sum())


def _dyadic_order(T: int) -> int:
    K = int(T).bit_length() - 1
    return K if 2**K == T else -1


def build_cascade_dyadic(params: CascadeParams, seed: SeedSpec) -> DeformationIncrements:
    """Cascade increments for a sample length that is an exact power of two."""
    K = _dyadic_order(params.T)
    if K < 1:
        raise ValueError(f"T = {params.T} is not a power of two; use build_cascade")
    prod = cascade_products(draw_multiplier_levels(params.lam, K, seed))
    return DeformationIncrements(_normalize(prod))


def window_offset(T: int, K_star: int, seed: SeedSpec) -> int:
    """Uniform integer offset in ``{0, ..., 2**K_star - T}``."""
    rng = seed.generator(CASCADE_STREAM, 0)
    return int(rng.integers(0, 2**K_star - T, endpoint=True))


def build_cascade(params: CascadeParams, seed: SeedSpec) -> DeformationIncrements:
    """Cascade increments for any ``T >= 2``.

    Non-dyadic lengths are cut as a random window of ``T`` consecutive cells
    from the smallest dyadic cascade longer than ``T``, then renormalized.
    """
    T = params.T
    if _dyadic_order(T) > 0:
        return build_cascade_dyadic(params, seed)
    K_star = T.bit_length()  # smallest K with T < 2**K
    prod = cascade_products(draw_multiplier_levels(params.lam, K_star, seed))
    r = window_offset(T, K_star, seed)
    return DeformationIncrements(_normalize(prod[r:r + T]))

"""Core series types, seeded random streams and elementary transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "PriceSeries",
    "LogReturnSeries",
    "SeedSpec",
    "to_log_returns",
    "cumulate",
]

ORIGINS = ("observed", "simulated", "filtered")


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PriceSeries:
    """Strictly positive price levels with optional ordered date labels."""

    values: np.ndarray
    timestamps: Optional[tuple] = None

    def __post_init__(self):
        values = _frozen_array(self.values)
        if values.ndim != 1 or values.size < 2:
            raise ValueError("a price series needs at least 2 observations")
        bad = np.flatnonzero(~(values > 0))
        if bad.size:
            i = int(bad[0])
            raise ValueError(f"price at index {i} is not strictly positive: {values[i]!r}")
        object.__setattr__(self, "values", values)
        if self.timestamps is not None:
            stamps = tuple(self.timestamps)
            if len(stamps) != values.size:
                raise ValueError("timestamps and values differ in length")
            for i in range(1, len(stamps)):
                if not stamps[i] > stamps[i - 1]:
                    raise ValueError(f"timestamps not strictly increasing at index {i}")
            object.__setattr__(self, "timestamps", stamps)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class LogReturnSeries:
    """One-period log returns. ``origin`` is observed, simulated or filtered."""

    values: np.ndarray
    origin: str = "observed"

    def __post_init__(self):
        values = _frozen_array(self.values)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("a return series needs at least 1 observation")
        if not np.all(np.isfinite(values)):
            raise ValueError("return series contains non-finite values")
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class SeedSpec:
    """Address of an independent random stream.

    Streams are derived with :class:`numpy.random.SeedSequence`, using
    ``stream_index`` (plus any sub-stream path) as the spawn key, so the
    stream for a given pair never depends on what else was drawn or in which
    process.
    """

    master_seed: int
    stream_index: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if int(self.stream_index) < 0:
            raise ValueError("stream_index must be non-negative")

    def generator(self, *path: int) -> np.random.Generator:
        """Generator for this stream, or for the sub-stream at ``path``."""
        seq = np.random.SeedSequence(
            int(self.master_seed), spawn_key=(int(self.stream_index),) + tuple(int(p) for p in path)
        )
        return np.random.Generator(np.random.PCG64(seq))


def to_log_returns(prices: PriceSeries, origin: str = "observed") -> LogReturnSeries:
    """First differences of log prices."""
    if not isinstance(prices, PriceSeries):
        prices = PriceSeries(np.asarray(prices, dtype=float))
    return LogReturnSeries(np.diff(np.log(prices.values)), origin=origin)


def cumulate(returns: LogReturnSeries | Sequence[float], p0: float = 0.0) -> np.ndarray:
    """Log-price levels starting at ``p0``; one element longer than ``returns``."""
    r = np.asarray(returns, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("return series contains non-finite values")
    out = np.empty(r.size + 1)
    out[0] = p0
    np.cumsum(r, out=out[1:])
    out[1:] += p0
    return out

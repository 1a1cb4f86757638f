"""Fixed (non-learnable) encoders: percentile basis, sinusoid table, interval ranks."""

from __future__ import annotations

import logging
from functools import lru_cache

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

K_DEFAULT = 11


def encode_percentile(p, k: int = K_DEFAULT) -> np.ndarray:
    """Spread a percentile in [0, 100] linearly over ``k`` evenly spaced basis points.

    Accepts a scalar or an array; the encoding is appended as a trailing axis.
    NaN inputs encode to the all-zero vector (item not active yet).
    """
    if k < 2:
        raise ConfigError(f"encoding size must be >= 2, got {k}")
    p = np.asarray(p, dtype=np.float64)
    missing = np.isnan(p)
    q = np.where(missing, 0.0, p)
    if np.any((q < 0) | (q > 100)):
        log.warning("percentile outside [0, 100] clamped")
        q = np.clip(q, 0.0, 100.0)
    scaled = q / (100.0 / (k - 1))
    lo = np.minimum(np.floor(scaled).astype(np.int64), k - 1)
    frac = scaled - lo
    flat = np.zeros((p.size, k), dtype=np.float64)
    rows = np.arange(p.size)
    lo, frac = lo.reshape(-1), frac.reshape(-1)
    flat[rows, lo] = 1.0 - frac
    up = lo + 1 < k
    flat[rows[up], lo[up] + 1] = frac[up]
    flat[missing.reshape(-1)] = 0.0
    return flat.reshape(p.shape + (k,))


@lru_cache(maxsize=32)
def _sinusoid(L: int, d: int) -> np.ndarray:
    i = np.arange(L, dtype=np.float64)[:, None]
    j = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = i / np.power(float(L), 2.0 * j / d)
    table = np.empty((L, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table.setflags(write=False)
    return table


def build_sinusoid_table(L: int, d: int) -> np.ndarray:
    """``table[i, 2j] = sin(i / L**(2j/d))`` and ``table[i, 2j+1] = cos(...)``.

    The same table serves the time-interval and the positional encoding.
    """
    if L < 1:
        raise ConfigError(f"table length must be >= 1, got {L}")
    if d < 2 or d % 2:
        raise ConfigError(f"embedding dim must be even and positive, got {d}")
    return _sinusoid(int(L), int(d))


def rank_intervals(timestamps, valid_len: int) -> np.ndarray:
    """Rank the gaps between consecutive valid events of one sequence.

    Valid events occupy the last ``valid_len`` slots. Each event after the first
    gets the rank of the gap that precedes it (smallest gap -> 0, ties by
    earlier position); the first valid slot and pads get 0.
    """
    timestamps = np.asarray(timestamps, dtype=np.int64)
    L = len(timestamps)
    ranks = np.zeros(L, dtype=np.int64)
    if valid_len <= 1:
        return ranks
    gaps = np.diff(timestamps[L - valid_len:])
    order = np.argsort(gaps, kind="stable")
    r = np.empty(len(gaps), dtype=np.int64)
    r[order] = np.arange(len(gaps))
    ranks[L - valid_len + 1:] = r
    return ranks


def rank_intervals_batch(timestamps: np.ndarray, valid_len: np.ndarray) -> np.ndarray:
    """Row-wise :func:`rank_intervals` for a (B, L) batch."""
    return np.stack([rank_intervals(t, int(n)) for t, n in zip(timestamps, valid_len)]) \
        if len(timestamps) else np.zeros((0, timestamps.shape[1]), dtype=np.int64)

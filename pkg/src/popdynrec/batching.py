"""Turn user histories into model-ready arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import rank_intervals_batch
from .errors import SamplingError
from .ingest import PAD, to_fixed_sequence
from .popdyn import PopularityTable, window_features

# named random sub-streams derived from one seed
STREAMS = {"init": 0, "shuffle": 1, "negatives": 2, "dropout": 3, "candidates": 4, "split": 5}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, extra)])


@dataclass
class SequenceBatch:
    items: np.ndarray  # (B, L), PAD on the left
    times: np.ndarray  # (B, L)
    valid: np.ndarray  # (B, L) bool
    ranks: np.ndarray  # (B, L)
    feats: np.ndarray  # (B, L, k(m+n))


def sequence_batch(histories, table: PopularityTable, L: int, offset: int, dtype) -> SequenceBatch:
    """Fixed-length arrays for a list of ``(items, timestamps)`` histories."""
    seqs = [to_fixed_sequence(i, t, L) for i, t in histories]
    items = np.stack([s.items for s in seqs]) if seqs else np.zeros((0, L), dtype=np.int64)
    times = np.stack([s.timestamps for s in seqs]) if seqs else np.zeros((0, L), dtype=np.int64)
    valid_len = np.array([s.valid_len for s in seqs], dtype=np.int64)
    valid = items != PAD
    ranks = rank_intervals_batch(times, valid_len)
    feats = window_features(table, items, times, offset, dtype=dtype)
    return SequenceBatch(items, times, valid, ranks, feats)


def sample_negatives(seen: np.ndarray, count: int, n_items: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws (with replacement) from items outside the sorted array ``seen``."""
    if len(seen) >= n_items:
        raise SamplingError("user has interacted with every item; no negatives available")
    out = np.empty(count, dtype=np.int64)
    filled = 0
    while filled < count:
        draw = rng.integers(0, n_items, size=max(2 * (count - filled), 8))
        draw = draw[~_contains(seen, draw)]
        take = min(len(draw), count - filled)
        out[filled:filled + take] = draw[:take]
        filled += take
    return out


def sample_distinct_negatives(seen: np.ndarray, count: int, n_items: int,
                              rng: np.random.Generator) -> np.ndarray:
    """``count`` distinct items outside ``seen`` (fewer if the catalog runs out)."""
    available = n_items - len(seen)
    if available <= 0:
        raise SamplingError("user has interacted with every item; no candidates available")
    count = min(count, available)
    if available <= 2 * count:
        pool = np.setdiff1d(np.arange(n_items), seen, assume_unique=False)
        return rng.choice(pool, size=count, replace=False)
    chosen: list[int] = []
    taken = set(seen.tolist())
    while len(chosen) < count:
        for x in rng.integers(0, n_items, size=2 * (count - len(chosen))).tolist():
            if x not in taken:
                taken.add(x)
                chosen.append(x)
                if len(chosen) == count:
                    break
    return np.asarray(chosen, dtype=np.int64)


def _contains(sorted_arr: np.ndarray, x: np.ndarray) -> np.ndarray:
    if len(sorted_arr) == 0:
        return np.zeros(x.shape, dtype=bool)
    pos = np.searchsorted(sorted_arr, x)
    pos = np.minimum(pos, len(sorted_arr) - 1)
    return sorted_arr[pos] == x

"""Per-period item popularity, cross-item percentiles and dynamics windows.

Two granularities are tracked. Fine periods (a week by default) hold raw
interaction counts; coarse periods (4 fine periods by default) hold
exponentially discounted cumulative counts. Every (item, period) value is
turned into a percentile against the other items active in that period, and
an item is then described at query time by the encoded percentiles of its
last ``m`` coarse and last ``n`` fine periods.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import K_DEFAULT, encode_percentile
from .errors import ConfigError, DataError
from .ingest import InteractionDataset

DAY = 86_400
POP_MAGIC = b"PDRPOP\x00\x01"


@dataclass(frozen=True)
class TimeBucketing:
    """Half-open fixed-width periods anchored at ``origin``.

    With ``calendar=True`` fine periods are ISO weeks (Monday start) and coarse
    periods are UTC calendar months, counted from those containing ``origin``.
    """

    origin: int
    fine_len: int = 7 * DAY
    coarse_len: int = 28 * DAY
    calendar: bool = False

    def __post_init__(self):
        if self.origin < 0:
            raise ConfigError("origin must be a non-negative timestamp")
        if not self.calendar:
            if self.fine_len <= 0 or self.coarse_len <= 0:
                raise ConfigError("period lengths must be positive")
            if self.coarse_len % self.fine_len:
                raise ConfigError("coarse period must be an integer multiple of the fine period")

    @classmethod
    def for_dataset(cls, ds: InteractionDataset, fine_days: float = 7, coarse_fine_ratio: int = 4,
                    calendar: bool = False) -> "TimeBucketing":
        if fine_days <= 0 or coarse_fine_ratio < 1 or int(coarse_fine_ratio) != coarse_fine_ratio:
            raise ConfigError("fine_days must be positive and coarse_fine_ratio a positive integer")
        fine_len = int(round(fine_days * DAY))
        return cls(int(ds.timestamps.min()), fine_len, fine_len * int(coarse_fine_ratio), calendar)

    def _week(self, t):
        # days since epoch; 1970-01-01 was a Thursday, so +3 aligns weeks to Monday
        return (np.asarray(t, dtype=np.int64) // DAY + 3) // 7

    def _month(self, t):
        return np.asarray(t, dtype=np.int64).astype("datetime64[s]").astype("datetime64[M]").astype(np.int64)

    def fine_period(self, t) -> np.ndarray:
        if self.calendar:
            return self._week(t) - self._week(self.origin)
        return (np.asarray(t, dtype=np.int64) - self.origin) // self.fine_len

    def coarse_period(self, t) -> np.ndarray:
        if self.calendar:
            return self._month(t) - self._month(self.origin)
        return (np.asarray(t, dtype=np.int64) - self.origin) // self.coarse_len

    def fine_end(self, f) -> np.ndarray:
        """Exclusive end timestamp of fine period ``f``."""
        f = np.asarray(f, dtype=np.int64)
        if self.calendar:
            week0 = int(self._week(self.origin))
            return (week0 + f + 1) * 7 * DAY - 3 * DAY
        return self.origin + (f + 1) * self.fine_len

    def coarse_for_fine(self, f) -> np.ndarray:
        """Last coarse period that has fully ended by the end of fine period ``f``."""
        f = np.asarray(f, dtype=np.int64)
        if not self.calendar:
            return (f + 1) * self.fine_len // self.coarse_len - 1
        end = self.fine_end(f)
        # the coarse period containing `end` started at or before it, so the one
        # before it is the last complete one (end is exclusive)
        return self.coarse_period(np.maximum(end, 0)) - 1

    def to_dict(self) -> dict:
        return {"origin": self.origin, "fine_len": self.fine_len,
                "coarse_len": self.coarse_len, "calendar": self.calendar}


def bucketize(ds: InteractionDataset, tb: TimeBucketing, event_mask=None):
    """Raw per-item counts over fine and coarse periods.

    Returns ``(fine_counts, coarse_counts)`` as int64 arrays shaped
    (n_items, n_fine) and (n_items, n_coarse). ``event_mask`` selects which
    events are counted (all by default).
    """
    items, times = ds.items, ds.timestamps
    if event_mask is not None:
        items, times = items[event_mask], times[event_mask]
    f_all = tb.fine_period(ds.timestamps)
    c_all = tb.coarse_period(ds.timestamps)
    if f_all.min() < 0:
        raise DataError("event before the bucketing origin")
    n_f, n_c = int(f_all.max()) + 1, int(c_all.max()) + 1
    f, c = tb.fine_period(times), tb.coarse_period(times)
    n_i = ds.n_items
    fine = np.bincount(items * n_f + f, minlength=n_i * n_f).reshape(n_i, n_f)
    coarse = np.bincount(items * n_c + c, minlength=n_i * n_c).reshape(n_i, n_c)
    return fine.astype(np.int64), coarse.astype(np.int64)


def discounted_coarse(raw_coarse, gamma: float) -> np.ndarray:
    """``a[t] = gamma * a[t-1] + c[t]``: the discounted sum of all coarse counts up to t."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    raw = np.asarray(raw_coarse, dtype=np.float64)
    out = np.empty_like(raw)
    acc = np.zeros(raw.shape[:-1])
    for t in range(raw.shape[-1]):
        acc = gamma * acc + raw[..., t]
        out[..., t] = acc
    return out


def percentile_ranks(values, active) -> np.ndarray:
    """Mid-rank percentile of each active value among the active values.

    ``100 * (#smaller + 0.5 * #equal_others) / max(1, N_active - 1)``;
    inactive entries get NaN.
    """
    values = np.asarray(values, dtype=np.float64)
    active = np.asarray(active, dtype=bool)
    out = np.full(values.shape, np.nan)
    pool = np.sort(values[active])
    n = len(pool)
    if n == 0:
        return out
    v = values[active]
    less = np.searchsorted(pool, v, side="left")
    leq = np.searchsorted(pool, v, side="right")
    out[active] = 100.0 * (less + 0.5 * (leq - less - 1)) / max(1, n - 1)
    return out


def _first_active(counts: np.ndarray) -> np.ndarray:
    nz = counts > 0
    first = np.argmax(nz, axis=1)
    first[~nz.any(axis=1)] = counts.shape[1]
    return first


def _percentile_table(values: np.ndarray, first: np.ndarray, include_inactive: bool) -> np.ndarray:
    out = np.empty(values.shape)
    for t in range(values.shape[1]):
        active = np.ones(len(values), dtype=bool) if include_inactive else first <= t
        out[:, t] = percentile_ranks(values[:, t], active)
    return out


@dataclass
class PopularityTable:
    """Per item x period counts and percentiles, plus the window configuration.

    ``pct_coarse``/``pct_fine`` are NaN where the item had no interaction up
    to that period; such entries encode to all-zero vectors.
    """

    bucketing: TimeBucketing
    gamma: float
    item_ids: tuple
    raw_fine_counts: np.ndarray
    raw_coarse_counts: np.ndarray
    discounted: np.ndarray
    pct_coarse: np.ndarray
    pct_fine: np.ndarray
    k: int = K_DEFAULT
    m: int = 12
    n: int = 4
    include_inactive: bool = False
    exclude_holdout: bool = False
    dataset_fingerprint: str = ""
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("raw_fine_counts", "raw_coarse_counts", "discounted", "pct_coarse", "pct_fine"):
            getattr(self, name).setflags(write=False)
        self._index = {v: i for i, v in enumerate(self.item_ids)}

    @property
    def fine(self) -> np.ndarray:
        return self.raw_fine_counts.astype(np.float64)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_fine(self) -> int:
        return self.raw_fine_counts.shape[1]

    @property
    def n_coarse(self) -> int:
        return self.raw_coarse_counts.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.k * (self.m + self.n)

    def item_index(self, item: str) -> int:
        return self._index.get(item, -1)

    def signature(self) -> dict:
        """Settings that must agree between a trained model and any table it scores."""
        tb = self.bucketing
        return {"gamma": self.gamma, "k": self.k, "m": self.m, "n": self.n,
                "fine_len": tb.fine_len, "coarse_len": tb.coarse_len, "calendar": tb.calendar,
                "include_inactive": self.include_inactive}


def build_popularity(ds: InteractionDataset, bucketing: TimeBucketing | None = None,
                     gamma: float = 0.5, k: int = K_DEFAULT, m: int = 12, n: int = 4,
                     include_inactive: bool = False, exclude_holdout: bool = False) -> PopularityTable:
    if bucketing is None:
        bucketing = TimeBucketing.for_dataset(ds)
    if m < 1 or n < 1:
        raise ConfigError("window sizes m and n must be >= 1")
    mask = ~ds.holdout_mask() if exclude_holdout else None
    fine, coarse = bucketize(ds, bucketing, mask)
    disc = discounted_coarse(coarse, gamma)
    pct_c = _percentile_table(disc, _first_active(coarse), include_inactive)
    pct_f = _percentile_table(fine.astype(np.float64), _first_active(fine), include_inactive)
    return PopularityTable(bucketing, float(gamma), ds.item_ids, fine, coarse, disc, pct_c, pct_f,
                           k=k, m=m, n=n, include_inactive=include_inactive,
                           exclude_holdout=exclude_holdout, dataset_fingerprint=ds.fingerprint())


def percentiles_at(table: PopularityTable, t: int, level: str = "coarse") -> np.ndarray:
    """Percentile column of every item at period index ``t`` (NaN = not active)."""
    src = {"coarse": table.pct_coarse, "fine": table.pct_fine}[level]
    return src[:, t].copy()


@dataclass(frozen=True)
class DynamicsWindow:
    coarse: np.ndarray  # (m, k)
    fine: np.ndarray  # (n, k)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.coarse.reshape(-1), self.fine.reshape(-1)])


def _gather(pct: np.ndarray, items: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """pct[items, idx] with NaN for unknown items and out-of-range periods."""
    ok = (items[:, None] >= 0) & (idx >= 0) & (idx < pct.shape[1])
    out = np.full(idx.shape, np.nan)
    rows = np.broadcast_to(items[:, None], idx.shape)
    out[ok] = pct[rows[ok], idx[ok]]
    return out


def window_percentiles(table: PopularityTable, items, t_query, offset: int = 1):
    """Percentile histories (N, m) coarse and (N, n) fine visible at ``t_query``.

    The fine window ends ``offset`` fine periods before the query's period and
    the coarse window ends with the last coarse period complete by then.
    """
    if offset < 1:
        raise ConfigError(f"offset must be >= 1 fine period, got {offset}")
    items = np.asarray(items, dtype=np.int64)
    t_query = np.broadcast_to(np.asarray(t_query, dtype=np.int64), items.shape).reshape(-1)
    items = items.reshape(-1)
    f = table.bucketing.fine_period(t_query) - offset
    c = table.bucketing.coarse_for_fine(f)
    c_idx = c[:, None] + np.arange(-table.m + 1, 1)[None, :]
    f_idx = f[:, None] + np.arange(-table.n + 1, 1)[None, :]
    return _gather(table.pct_coarse, items, c_idx), _gather(table.pct_fine, items, f_idx)


def window_features(table: PopularityTable, items, t_query, offset: int = 1,
                    dtype=np.float32) -> np.ndarray:
    """Flattened encoded windows, shape ``items.shape + (k*(m+n),)``.

    Item index -1 (padding or an item unknown to the table) yields zeros.
    """
    items = np.asarray(items, dtype=np.int64)
    shape = items.shape
    pc, pf = window_percentiles(table, items, np.broadcast_to(t_query, shape), offset)
    enc = encode_percentile(np.concatenate([pc, pf], axis=1), table.k)
    return enc.reshape(shape + (table.feature_dim,)).astype(dtype, copy=False)


def dynamics_at(table: PopularityTable, item, t_query: int, offset: int = 1) -> DynamicsWindow:
    """Window for one item (dense index or string id); unknown items are all-zero."""
    if isinstance(item, str):
        item = table.item_index(item)
    pc, pf = window_percentiles(table, np.array([item]), np.array([t_query]), offset)
    return DynamicsWindow(encode_percentile(pc[0], table.k), encode_percentile(pf[0], table.k))


# ---------------------------------------------------------------------------
# cache file
#
# Little-endian layout:
#   8 bytes   magic b"PDRPOP\0\1"
#   uint64    header length H
#   H bytes   UTF-8 JSON header: gamma, bucketing, k, m, n, n_items, n_fine,
#             n_coarse, item_ids, include_inactive, exclude_holdout,
#             dataset_fingerprint
#   then, each item-major (one contiguous row of periods per item):
#   int64     raw_fine_counts[n_items, n_fine]
#   int64     raw_coarse_counts[n_items, n_coarse]
#   float64   discounted[n_items, n_coarse]
#   float64   pct_coarse[n_items, n_coarse]   (NaN = inactive)
#   float64   pct_fine[n_items, n_fine]
# ---------------------------------------------------------------------------

_ARRAYS = (("raw_fine_counts", "<i8", "n_fine"), ("raw_coarse_counts", "<i8", "n_coarse"),
           ("discounted", "<f8", "n_coarse"), ("pct_coarse", "<f8", "n_coarse"),
           ("pct_fine", "<f8", "n_fine"))


def popularity_to_bytes(table: PopularityTable) -> bytes:
    head = {
        "format": "popdynrec-popularity", "version": 1,
        "gamma": table.gamma, "bucketing": table.bucketing.to_dict(),
        "k": table.k, "m": table.m, "n": table.n,
        "n_items": table.n_items, "n_fine": table.n_fine, "n_coarse": table.n_coarse,
        "item_ids": list(table.item_ids),
        "include_inactive": table.include_inactive, "exclude_holdout": table.exclude_holdout,
        "dataset_fingerprint": table.dataset_fingerprint,
    }
    raw = json.dumps(head, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    parts = [POP_MAGIC, struct.pack("<Q", len(raw)), raw]
    for name, dt, _ in _ARRAYS:
        parts.append(np.ascontiguousarray(getattr(table, name), dtype=dt).tobytes())
    return b"".join(parts)


def popularity_from_bytes(buf: bytes) -> PopularityTable:
    if buf[:8] != POP_MAGIC:
        raise DataError("not a popularity cache (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    head = json.loads(buf[16:16 + hlen].decode())
    pos = 16 + hlen
    arrays = {}
    for name, dt, cols in _ARRAYS:
        count = head["n_items"] * head[cols]
        if pos + 8 * count > len(buf):
            raise DataError("popularity cache truncated")
        arrays[name] = np.frombuffer(buf, dt, count, pos).reshape(head["n_items"], head[cols]).copy()
        pos += 8 * count
    if pos != len(buf):
        raise DataError("trailing bytes in popularity cache")
    return PopularityTable(TimeBucketing(**head["bucketing"]), head["gamma"], tuple(head["item_ids"]),
                           k=head["k"], m=head["m"], n=head["n"],
                           include_inactive=head["include_inactive"],
                           exclude_holdout=head["exclude_holdout"],
                           dataset_fingerprint=head["dataset_fingerprint"], **arrays)


def save_popularity(table: PopularityTable, path) -> None:
    Path(path).write_bytes(popularity_to_bytes(table))


def load_popularity(path) -> PopularityTable:
    try:
        return popularity_from_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

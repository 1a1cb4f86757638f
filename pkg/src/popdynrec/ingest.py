"""Interaction-log parsing, chronological leave-one-out split and dataset caches."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, EmptyDatasetError

PAD = -1
DATASET_MAGIC = b"PDRDS\x00\x01\x00"


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int
    rating: float | None = None

    def __post_init__(self):
        if not self.user or not self.item:
            raise DataError("user and item ids must be non-empty")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class RowError:
    line: int
    message: str


@dataclass(frozen=True)
class UserSequence:
    items: np.ndarray
    timestamps: np.ndarray
    valid_len: int


class InteractionDataset:
    """Timestamped event log grouped into per-user chronological sequences.

    Events are stored flat: ``items[offsets[u]:offsets[u+1]]`` is user ``u``'s
    sequence in ascending time order. Dense user/item indices follow first
    appearance in the input and are internal; reports use the string ids.
    """

    def __init__(self, user_ids, item_ids, offsets, items, timestamps,
                 split=False, parse_errors=()):
        self.user_ids: tuple[str, ...] = tuple(user_ids)
        self.item_ids: tuple[str, ...] = tuple(item_ids)
        self.offsets = _frozen(np.asarray(offsets, dtype=np.int64))
        self.items = _frozen(np.asarray(items, dtype=np.int64))
        self.timestamps = _frozen(np.asarray(timestamps, dtype=np.int64))
        self.split = bool(split)
        self.parse_errors: tuple[RowError, ...] = tuple(parse_errors)
        if len(self.offsets) != len(self.user_ids) + 1:
            raise DataError("offsets length must be n_users + 1")
        if self.offsets[-1] != len(self.items) or len(self.items) != len(self.timestamps):
            raise DataError("event arrays are inconsistent with offsets")
        self._user_index = {u: i for i, u in enumerate(self.user_ids)}
        self._item_index = {v: i for i, v in enumerate(self.item_ids)}

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_events(self) -> int:
        return len(self.items)

    def user_index(self, user: str) -> int:
        return self._user_index[user]

    def item_index(self, item: str) -> int | None:
        return self._item_index.get(item)

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def sequence(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.offsets[u], self.offsets[u + 1]
        return self.items[lo:hi], self.timestamps[lo:hi]

    # split accessors; all raise if build_split was not applied
    def _require_split(self):
        if not self.split:
            raise DataError("dataset has no split; call build_split first")

    def has_eval(self, u: int) -> bool:
        self._require_split()
        return self.offsets[u + 1] - self.offsets[u] >= 3

    def eval_users(self) -> np.ndarray:
        self._require_split()
        return np.flatnonzero(self.lengths() >= 3)

    def train_sequence(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        items, times = self.sequence(u)
        if self.split and len(items) >= 3:
            return items[:-2], times[:-2]
        return items, times

    def valid_event(self, u: int) -> tuple[int, int] | None:
        items, times = self.sequence(u)
        if not self.has_eval(u):
            return None
        return int(items[-2]), int(times[-2])

    def test_event(self, u: int) -> tuple[int, int] | None:
        items, times = self.sequence(u)
        if not self.has_eval(u):
            return None
        return int(items[-1]), int(times[-1])

    def holdout_mask(self) -> np.ndarray:
        """Boolean mask over events marking validation and test interactions."""
        mask = np.zeros(self.n_events, dtype=bool)
        if not self.split:
            return mask
        lens = self.lengths()
        ends = self.offsets[1:]
        has = lens >= 3
        mask[ends[has] - 1] = True
        mask[ends[has] - 2] = True
        return mask

    def event_users(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_users, dtype=np.int64), self.lengths())

    def user_item_sets(self) -> list[np.ndarray]:
        return [np.unique(self.sequence(u)[0]) for u in range(self.n_users)]

    def interactions(self) -> Iterable[Interaction]:
        users = self.event_users()
        for e in range(self.n_events):
            yield Interaction(self.user_ids[users[e]], self.item_ids[self.items[e]],
                              int(self.timestamps[e]))

    def stats(self) -> dict:
        n_u, n_i, n_a = self.n_users, self.n_items, self.n_events
        return {
            "users": n_u,
            "items": n_i,
            "actions": n_a,
            "avg_length": n_a / n_u if n_u else 0.0,
            "density": n_a / (n_u * n_i) if n_u and n_i else 0.0,
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(dataset_to_bytes(self)).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        return (self.user_ids == other.user_ids and self.item_ids == other.item_ids
                and self.split == other.split
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.items, other.items)
                and np.array_equal(self.timestamps, other.timestamps))

    def __repr__(self):
        return (f"InteractionDataset(users={self.n_users}, items={self.n_items}, "
                f"events={self.n_events}, split={self.split})")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def from_interactions(interactions: Iterable[Interaction | tuple],
                      parse_errors: Sequence[RowError] = ()) -> InteractionDataset:
    """Build a dataset from events given in input order.

    Ratings are dropped (every rated event counts as one implicit interaction)
    and duplicate (user, item) pairs are kept.
    """
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users, items, times = [], [], []
    for row in interactions:
        if not isinstance(row, Interaction):
            row = Interaction(*row)
        users.append(user_index.setdefault(row.user, len(user_index)))
        items.append(item_index.setdefault(row.item, len(item_index)))
        times.append(row.timestamp)
    if not users:
        raise EmptyDatasetError("no valid interactions")
    users_a = np.asarray(users, dtype=np.int64)
    times_a = np.asarray(times, dtype=np.int64)
    # lexsort is stable: same-timestamp events keep input order
    order = np.lexsort((times_a, users_a))
    counts = np.bincount(users_a, minlength=len(user_index))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return InteractionDataset(list(user_index), list(item_index), offsets,
                              np.asarray(items, dtype=np.int64)[order], times_a[order],
                              parse_errors=parse_errors)


def _parse_timestamp(raw: str) -> int:
    raw = raw.strip()
    try:
        t = int(raw)
    except ValueError:
        f = float(raw)  # raises ValueError on garbage
        if not np.isfinite(f) or f != int(f):
            raise ValueError(f"non-integral timestamp {raw!r}")
        t = int(f)
    if t < 0:
        raise ValueError(f"negative timestamp {raw!r}")
    return t


def parse_log(path, format: str = "csv", column_map: Mapping[str, int | str] | None = None,
              delimiter: str | None = None, header: bool = False) -> InteractionDataset:
    """Parse a CSV/TSV interaction log.

    ``column_map`` maps ``user``, ``item``, ``timestamp`` (and optionally
    ``rating``) to column positions, or to header names when ``header`` is set.
    Rows with unparsable fields are skipped and recorded in
    ``dataset.parse_errors``.
    """
    if format not in ("csv", "tsv"):
        raise ConfigError(f"unknown log format {format!r}")
    if delimiter is None:
        delimiter = "," if format == "csv" else "\t"
    column_map = dict(column_map or {"user": 0, "item": 1, "timestamp": 2})
    for key in ("user", "item", "timestamp"):
        if key not in column_map:
            raise ConfigError(f"column_map is missing {key!r}")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    cols = dict(column_map)
    rows, errors = [], []
    for lineno, fields in enumerate(reader, start=1):
        if header and lineno == 1:
            names = [f.strip() for f in fields]
            for key, col in column_map.items():
                if isinstance(col, str):
                    if col not in names:
                        raise ConfigError(f"header has no column {col!r}")
                    cols[key] = names.index(col)
            continue
        if not fields or all(not f.strip() for f in fields):
            continue
        try:
            user = fields[cols["user"]].strip()
            item = fields[cols["item"]].strip()
            ts = _parse_timestamp(fields[cols["timestamp"]])
            rows.append(Interaction(user, item, ts))
        except IndexError:
            errors.append(RowError(lineno, f"expected more columns, got {len(fields)}"))
        except (ValueError, DataError) as exc:
            errors.append(RowError(lineno, str(exc)))
    if not rows:
        raise EmptyDatasetError(f"{path}: zero valid rows ({len(errors)} rejected)")
    return from_interactions(rows, parse_errors=errors)


def build_split(ds: InteractionDataset) -> InteractionDataset:
    """Mark the chronological leave-one-out split.

    Users with at least three events hold out their second-to-last event for
    validation and the last for testing; shorter users are train-only.
    """
    return InteractionDataset(ds.user_ids, ds.item_ids, ds.offsets, ds.items, ds.timestamps,
                              split=True, parse_errors=ds.parse_errors)


def to_fixed_sequence(items, timestamps, L: int, pad_item: int = PAD) -> UserSequence:
    """Keep the latest ``L`` events, left-padding shorter histories."""
    if L <= 0:
        raise ConfigError(f"sequence length must be positive, got {L}")
    items = np.asarray(items, dtype=np.int64)[-L:]
    timestamps = np.asarray(timestamps, dtype=np.int64)[-L:]
    n = len(items)
    out_items = np.full(L, pad_item, dtype=np.int64)
    out_times = np.zeros(L, dtype=np.int64)
    if n:
        out_items[L - n:] = items
        out_times[L - n:] = timestamps
    return UserSequence(out_items, out_times, n)


# ---------------------------------------------------------------------------
# caches
#
# Binary layout (all little-endian):
#   8 bytes   magic b"PDRDS\0\1\0"
#   uint64    header length H
#   H bytes   UTF-8 JSON header: n_users, n_items, n_events, user_ids, item_ids, split
#   int64     offsets[n_users + 1]
#   int64     items[n_events]
#   int64     timestamps[n_events]
#
# NDJSON layout: a header line with the same JSON header, then one
# {"u": user, "i": item, "t": timestamp} line per event in stored order.
# ---------------------------------------------------------------------------


def _header(ds: InteractionDataset) -> dict:
    return {
        "format": "popdynrec-dataset",
        "version": 1,
        "n_users": ds.n_users,
        "n_items": ds.n_items,
        "n_events": ds.n_events,
        "split": ds.split,
        "user_ids": list(ds.user_ids),
        "item_ids": list(ds.item_ids),
    }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dataset_to_bytes(ds: InteractionDataset) -> bytes:
    head = _dumps(_header(ds)).encode("utf-8")
    return b"".join([
        DATASET_MAGIC,
        struct.pack("<Q", len(head)),
        head,
        ds.offsets.astype("<i8").tobytes(),
        ds.items.astype("<i8").tobytes(),
        ds.timestamps.astype("<i8").tobytes(),
    ])


def dataset_from_bytes(buf: bytes) -> InteractionDataset:
    if buf[:8] != DATASET_MAGIC:
        raise DataError("not a dataset cache (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    head = json.loads(buf[16:16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    n_u, n_e = head["n_users"], head["n_events"]
    expected = pos + 8 * (n_u + 1) + 16 * n_e
    if len(buf) != expected:
        raise DataError(f"dataset cache size {len(buf)} != expected {expected}")
    offsets = np.frombuffer(buf, "<i8", n_u + 1, pos)
    pos += 8 * (n_u + 1)
    items = np.frombuffer(buf, "<i8", n_e, pos)
    pos += 8 * n_e
    times = np.frombuffer(buf, "<i8", n_e, pos)
    return InteractionDataset(head["user_ids"], head["item_ids"], offsets.astype(np.int64),
                              items.astype(np.int64), times.astype(np.int64), split=head["split"])


def dataset_to_ndjson(ds: InteractionDataset) -> str:
    lines = [_dumps(_header(ds))]
    users = ds.event_users()
    for e in range(ds.n_events):
        lines.append(_dumps({"u": ds.user_ids[users[e]], "i": ds.item_ids[ds.items[e]],
                             "t": int(ds.timestamps[e])}))
    return "\n".join(lines) + "\n"


def dataset_from_ndjson(text: str) -> InteractionDataset:
    lines = text.splitlines()
    if not lines:
        raise EmptyDatasetError("empty NDJSON cache")
    head = json.loads(lines[0])
    if head.get("format") != "popdynrec-dataset":
        raise DataError("not a dataset NDJSON cache")
    uidx = {u: i for i, u in enumerate(head["user_ids"])}
    iidx = {v: i for i, v in enumerate(head["item_ids"])}
    n_e = head["n_events"]
    if len(lines) - 1 != n_e:
        raise DataError(f"expected {n_e} events, found {len(lines) - 1}")
    users = np.empty(n_e, dtype=np.int64)
    items = np.empty(n_e, dtype=np.int64)
    times = np.empty(n_e, dtype=np.int64)
    for e, line in enumerate(lines[1:]):
        rec = json.loads(line)
        users[e], items[e], times[e] = uidx[rec["u"]], iidx[rec["i"]], rec["t"]
    if np.any(np.diff(users) < 0):
        raise DataError("NDJSON events are not grouped by user")
    counts = np.bincount(users, minlength=len(uidx))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return InteractionDataset(head["user_ids"], head["item_ids"], offsets, items, times,
                              split=head["split"])


def save_dataset(ds: InteractionDataset, path, fmt: str = "binary") -> None:
    path = Path(path)
    if fmt == "binary":
        path.write_bytes(dataset_to_bytes(ds))
    elif fmt == "ndjson":
        path.write_text(dataset_to_ndjson(ds), encoding="utf-8")
    else:
        raise ConfigError(f"unknown cache format {fmt!r}")


def load_dataset(path) -> InteractionDataset:
    """Load a cache written by :func:`save_dataset`, detecting the format."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if buf[:8] == DATASET_MAGIC:
        return dataset_from_bytes(buf)
    return dataset_from_ndjson(buf.decode("utf-8"))

"""Interaction logs, calendar time slicing, graphs, histories and BPR sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


# ------------------------------------------------------------------ log

@dataclass(eq=False)
class InteractionLog:
    """Deduplicated (user, item, timestamp) events with dense integer ids.

    Rows are kept in canonical order: by timestamp, then user, then item.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: list
    item_ids: list

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self):
        return len(self.users)

    def __eq__(self, other):
        if not isinstance(other, InteractionLog):
            return NotImplemented
        return (self.user_ids == other.user_ids and self.item_ids == other.item_ids
                and np.array_equal(self.users, other.users)
                and np.array_equal(self.items, other.items)
                and np.array_equal(self.timestamps, other.timestamps))

    def stats(self) -> dict:
        return {"users": self.num_users, "items": self.num_items, "actions": len(self)}

    @classmethod
    def from_raw(cls, rows) -> "InteractionLog":
        """Build from an iterable of (raw_user, raw_item, unix_seconds).

        Ids are assigned by first appearance time, ties broken by the raw id,
        so the mapping does not depend on row order in the source.
        """
        rows = list(rows)
        if not rows:
            raise DataError("no interactions")
        uniq = sorted(set((str(u), str(i), int(t)) for u, i, t in rows), key=lambda r: (r[2], r[0], r[1]))
        user_ids = _first_seen_order((u, t) for u, _, t in uniq)
        item_ids = _first_seen_order((i, t) for _, i, t in uniq)
        umap = {u: k for k, u in enumerate(user_ids)}
        imap = {i: k for k, i in enumerate(item_ids)}
        users = np.array([umap[u] for u, _, _ in uniq], dtype=np.int64)
        items = np.array([imap[i] for _, i, _ in uniq], dtype=np.int64)
        ts = np.array([t for _, _, t in uniq], dtype=np.int64)
        order = np.lexsort((items, users, ts))
        return cls(users[order], items[order], ts[order], user_ids, item_ids)

    def subset(self, mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.users[mask], self.items[mask], self.timestamps[mask]


def _first_seen_order(pairs):
    first: dict[str, int] = {}
    for key, t in pairs:
        if key not in first or t < first[key]:
            first[key] = t
    return sorted(first, key=lambda k: (first[k], k))


def ingest(path, delimiter: str = "\t", header: bool | None = None) -> InteractionLog:
    """Read ``user<delim>item<delim>unix_seconds`` lines.

    ``header=None`` skips the first line only when its timestamp column is
    not an integer.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(delimiter)
            if lineno == 1 and header is not False:
                if header or (len(parts) >= 3 and not _is_int(parts[2])):
                    continue
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {line!r}")
            if not _is_int(parts[2]):
                raise DataError(f"{path}:{lineno}: bad timestamp {parts[2]!r}")
            rows.append((parts[0], parts[1], int(parts[2])))
    if not rows:
        raise DataError(f"{path}: no interactions")
    result = InteractionLog.from_raw(rows)
    if len(result) < len(rows):
        log.info("dropped %d duplicate rows", len(rows) - len(result))
    log.info("ingested %s: %s", path, result.stats())
    return result


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def write_log(interactions: InteractionLog, path, delimiter: str = "\t") -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i, t in zip(interactions.users, interactions.items, interactions.timestamps):
            fh.write(f"{interactions.user_ids[u]}{delimiter}{interactions.item_ids[i]}{delimiter}{t}\n")


def write_id_maps(interactions: InteractionLog, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for fname, ids in (("user_ids.txt", interactions.user_ids), ("item_ids.txt", interactions.item_ids)):
        with (directory / fname).open("w", encoding="utf-8") as fh:
            fh.writelines(f"{raw}\t{k}\n" for k, raw in enumerate(ids))


# --------------------------------------------------------------- calendar

def month_index(ts) -> np.ndarray:
    """Months since 1970-01 (UTC) for unix-second timestamps."""
    months = np.asarray(ts, dtype="int64").astype("datetime64[s]").astype("datetime64[M]")
    return months.astype(np.int64)


def month_start(index: int) -> int:
    """Unix seconds at the start of the month with the given month index."""
    return int(np.datetime64(int(index), "M").astype("datetime64[s]").astype(np.int64))


def parse_time(value) -> int:
    """Accept unix seconds or ``YYYY-MM[-DD]`` (UTC)."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    s = str(value).strip()
    if _is_int(s):
        return int(s)
    for fmt in ("%Y-%m-%d", "%Y-%m", "%Y/%m"):
        try:
            return int(datetime.strptime(s, fmt).replace(tzinfo=timezone.utc).timestamp())
        except ValueError:
            continue
    raise ValueError(f"unrecognised time {value!r}")


def add_months(ts: int, months: int) -> int:
    d = datetime.fromtimestamp(int(ts), tz=timezone.utc)
    m = d.month - 1 + months
    year, month = d.year + m // 12, m % 12 + 1
    day = d.day
    while True:
        try:
            return int(d.replace(year=year, month=month, day=day).timestamp())
        except ValueError:
            day -= 1


# ---------------------------------------------------------------- slicing

@dataclass
class TimeSlice:
    index: int
    start: int
    end: int
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return len(self.users)


@dataclass
class TimeSlicedDataset:
    log: InteractionLog
    granularity_months: int
    cut_time: int
    val_end: int
    slices: list[TimeSlice]
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    _observed_keys: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_users(self):
        return self.log.num_users

    @property
    def num_items(self):
        return self.log.num_items

    @property
    def num_slices(self):
        return len(self.slices)

    def part(self, name: str):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.log.users[idx], self.log.items[idx], self.log.timestamps[idx]

    def train_keys(self) -> np.ndarray:
        """Sorted ``user * I + item`` keys over the training horizon."""
        if self._observed_keys is None:
            u, i, _ = self.part("train")
            self._observed_keys = np.unique(u * self.num_items + i)
        return self._observed_keys

    def all_keys(self) -> np.ndarray:
        return np.unique(self.log.users * self.num_items + self.log.items)


def slice_by_time(interactions: InteractionLog, granularity_months: int, cut_time,
                  val_window_months: int = 6) -> TimeSlicedDataset:
    """Split at ``cut_time`` and bucket training events into calendar slices.

    A bucket spans ``granularity_months`` calendar months (UTC) aligned to
    absolute month numbering, so with granularity 2 January and February of
    a year share a bucket.  Validation covers ``val_window_months`` months
    after the cut; everything later is test.
    """
    if granularity_months < 1:
        raise ValueError("granularity_months must be >= 1")
    cut = parse_time(cut_time)
    ts = interactions.timestamps
    train_mask = ts < cut
    if not train_mask.any():
        raise DataError("no training interactions before cut_time")
    val_end = add_months(cut, val_window_months)
    val_mask = (ts >= cut) & (ts < val_end)
    test_mask = ts >= val_end

    train_idx = np.flatnonzero(train_mask)
    buckets = month_index(ts[train_idx]) // granularity_months
    present = np.unique(buckets)
    missing = (present.max() - present.min() + 1) - len(present)
    if missing:
        log.warning("dropping %d empty time slices", missing)
    slices = []
    for k, b in enumerate(present):
        sel = train_idx[buckets == b]
        start = month_start(int(b) * granularity_months)
        end = min(month_start(int(b + 1) * granularity_months), cut)
        slices.append(TimeSlice(k, start, end, interactions.users[sel],
                                interactions.items[sel], interactions.timestamps[sel]))
    return TimeSlicedDataset(interactions, granularity_months, cut, val_end, slices,
                             train_idx, np.flatnonzero(val_mask), np.flatnonzero(test_mask))


# ------------------------------------------------------------------ graph

@dataclass
class InteractionGraph:
    """Bipartite user-item graph over ``U + I`` nodes (items offset by U).

    ``adjacency`` holds a_{m,n} = 1/sqrt(|N_m||N_n|) on edges; ``self_coef``
    holds a_{m,m} = 1/|N_m|, or 1 for isolated nodes.
    """

    num_users: int
    num_items: int
    adjacency: sp.csr_matrix
    self_coef: np.ndarray
    degree: np.ndarray

    @property
    def num_nodes(self):
        return self.num_users + self.num_items

    def coefficient(self, m: int, n: int) -> float:
        return float(self.adjacency[m, n])


def build_graph(users, items, num_users: int, num_items: int) -> InteractionGraph:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= num_users):
        raise IndexError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= num_items):
        raise IndexError("item index out of range")
    n = num_users + num_items
    keys = np.unique(users * num_items + items)
    eu, ei = keys // num_items, keys % num_items + num_users
    degree = np.bincount(np.concatenate([eu, ei]), minlength=n).astype(np.float64)
    coef = 1.0 / np.sqrt(degree[eu] * degree[ei])
    rows = np.concatenate([eu, ei])
    cols = np.concatenate([ei, eu])
    vals = np.concatenate([coef, coef])
    order = np.lexsort((cols, rows))
    adjacency = sp.csr_matrix((vals[order], (rows[order], cols[order])), shape=(n, n))
    self_coef = np.where(degree > 0, 1.0 / np.maximum(degree, 1.0), 1.0)
    return InteractionGraph(num_users, num_items, adjacency, self_coef, degree)


# -------------------------------------------------------------- sequences

def user_sequences(users, items, timestamps, reference_time: int, max_seq_len: int,
                   num_users: int | None = None) -> dict[int, np.ndarray]:
    """Items each user touched strictly before ``reference_time``, oldest first,
    keeping the ``max_seq_len`` most recent."""
    users = np.asarray(users)
    items = np.asarray(items)
    timestamps = np.asarray(timestamps)
    mask = timestamps < reference_time
    u, i, t = users[mask], items[mask], timestamps[mask]
    order = np.lexsort((t, u))  # stable in input order for equal times
    u, i = u[order], i[order]
    out: dict[int, np.ndarray] = {}
    if num_users is not None:
        out = {k: np.zeros(0, dtype=np.int64) for k in range(num_users)}
    if len(u):
        bounds = np.flatnonzero(np.diff(u)) + 1
        for chunk_u, chunk_i in zip(np.split(u, bounds), np.split(i, bounds)):
            seq = chunk_i[-max_seq_len:] if max_seq_len > 0 else chunk_i[:0]
            out[int(chunk_u[0])] = seq.astype(np.int64)
    return out


class PaddedSequences(NamedTuple):
    """Left-padded histories: ``items[u, -lengths[u]:]`` are the real entries."""

    items: np.ndarray
    lengths: np.ndarray


def pad_sequences(seqs: dict[int, np.ndarray], num_users: int, max_seq_len: int) -> PaddedSequences:
    items = np.zeros((num_users, max_seq_len), dtype=np.int64)
    lengths = np.zeros(num_users, dtype=np.int64)
    for u, s in seqs.items():
        s = s[-max_seq_len:] if max_seq_len > 0 else s[:0]
        lengths[u] = len(s)
        if len(s):
            items[u, max_seq_len - len(s):] = s
    return PaddedSequences(items, lengths)


# ------------------------------------------------------------ BPR sampling

class BprBatch(NamedTuple):
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return len(self.users)


MAX_NEGATIVE_RETRIES = 100


def sample_bpr_batch(users, items, batch_size: int, rng: np.random.Generator,
                     observed_keys: np.ndarray, num_items: int) -> BprBatch:
    """Uniform positives from the slice; uniform negatives not in ``observed_keys``.

    ``observed_keys`` are sorted ``user * num_items + item`` codes.  After
    ``MAX_NEGATIVE_RETRIES`` redraws any item other than the positive is
    accepted.
    """
    users = np.asarray(users)
    if len(users) == 0:
        raise DataError("cannot sample from an empty slice")
    pick = rng.integers(0, len(users), size=batch_size)
    u, p = users[pick], np.asarray(items)[pick]
    neg = rng.integers(0, num_items, size=batch_size)
    bad = _observed(u, neg, observed_keys, num_items) | (neg == p)
    for _ in range(MAX_NEGATIVE_RETRIES):
        if not bad.any():
            break
        where = np.flatnonzero(bad)
        neg[where] = rng.integers(0, num_items, size=len(where))
        bad[where] = _observed(u[where], neg[where], observed_keys, num_items) | (neg[where] == p[where])
    if bad.any():
        where = np.flatnonzero(bad)
        log.warning("negative retry cap hit for %d triples; accepting observed negatives", len(where))
        if num_items > 1:
            # any item other than the positive
            shift = rng.integers(1, num_items, size=len(where))
            neg[where] = (p[where] + shift) % num_items
    return BprBatch(u, p, neg)


def _observed(u, i, keys, num_items):
    if len(keys) == 0:
        return np.zeros(len(u), dtype=bool)
    q = u * num_items + i
    pos = np.searchsorted(keys, q)
    pos = np.minimum(pos, len(keys) - 1)
    return keys[pos] == q

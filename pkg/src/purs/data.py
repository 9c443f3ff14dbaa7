"""Interaction logs: parsing, binarisation, behaviour sequences and splits."""

from __future__ import annotations

import csv
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, SchemaError

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 3.5


@dataclass(frozen=True)
class InteractionEvent:
    user_id: str
    item_id: str
    label: int
    timestamp: int
    raw_rating: float | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class BehaviorSequence:
    user_id: str
    items: tuple[str, ...]
    timestamps: tuple[int, ...]


@dataclass(frozen=True)
class SessionConfig:
    window_k: int = 10

    def __post_init__(self):
        if self.window_k < 1:
            raise DataError(f"window_k must be >= 1, got {self.window_k}")


@dataclass(frozen=True)
class Schema:
    """Column mapping for a delimited interaction file.

    Exactly one of ``rating`` (binarised with ``threshold``) or ``label``
    must name a column.
    """

    user: str = "user_id"
    item: str = "item_id"
    timestamp: str = "timestamp"
    rating: str | None = "rating"
    label: str | None = None
    threshold: float = DEFAULT_THRESHOLD
    delimiter: str | None = None

    def __post_init__(self):
        if (self.rating is None) == (self.label is None):
            raise SchemaError("schema needs exactly one of 'rating' or 'label'")


@dataclass
class ParseResult:
    events: list[InteractionEvent]
    malformed: int = 0
    malformed_lines: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


def binarize(raw_rating: float, threshold: float = DEFAULT_THRESHOLD) -> int:
    """1 iff the rating is strictly above the threshold."""
    return int(raw_rating > threshold)


def _delimiter_for(path: str, override: str | None) -> str:
    if override:
        return override
    ext = os.path.splitext(path)[1].lower()
    return "\t" if ext in (".tsv", ".tab", ".inter", ".data") else ","


def parse_interactions(path: str | os.PathLike, schema: Schema = Schema()) -> ParseResult:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"interaction file not found: {path}")
    delim = _delimiter_for(path, schema.delimiter)
    events: list[InteractionEvent] = []
    bad: list[int] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delim)
        header = reader.fieldnames or []
        wanted = [schema.user, schema.item, schema.timestamp, schema.rating or schema.label]
        for col in wanted:
            if col not in header:
                raise SchemaError(f"missing column {col!r} in {path}")
        for lineno, row in enumerate(reader, start=2):
            try:
                user, item = row[schema.user], row[schema.item]
                if not user or not item:
                    raise ValueError("empty key")
                ts = int(float(row[schema.timestamp]))
                if schema.rating is not None:
                    raw = float(row[schema.rating])
                    if not math.isfinite(raw):
                        raise ValueError("non-finite rating")
                    label = binarize(raw, schema.threshold)
                else:
                    raw_text = row.get("raw_rating") or ""
                    raw = float(raw_text) if raw_text else None
                    label = int(row[schema.label])
                    if label not in (0, 1):
                        raise ValueError("label outside {0,1}")
            except (TypeError, ValueError):
                bad.append(lineno)
                continue
            events.append(InteractionEvent(user, item, label, ts, raw))
    if bad:
        log.warning("%s: skipped %d malformed rows", path, len(bad))
    return ParseResult(events, len(bad), bad)


CANONICAL_COLUMNS = ("user_id", "item_id", "label", "timestamp", "raw_rating")
CANONICAL_SCHEMA = Schema(rating=None, label="label", delimiter=",")


def write_events(events: Iterable[InteractionEvent], path: str | os.PathLike) -> None:
    """Write the canonical CSV (readable back with ``CANONICAL_SCHEMA``)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CANONICAL_COLUMNS)
        for e in events:
            w.writerow([e.user_id, e.item_id, e.label, e.timestamp, "" if e.raw_rating is None else repr(e.raw_rating)])


def load_features(path: str | os.PathLike, key: str, columns: Sequence[str] | None = None,
                  delimiter: str | None = None) -> dict[str, np.ndarray]:
    """Read one numeric feature vector per entity from a delimited file."""
    path = os.fspath(path)
    delim = _delimiter_for(path, delimiter)
    out: dict[str, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delim)
        header = reader.fieldnames or []
        if key not in header:
            raise SchemaError(f"missing column {key!r} in {path}")
        cols = [c for c in header if c != key] if columns is None else list(columns)
        for c in cols:
            if c not in header:
                raise SchemaError(f"missing column {c!r} in {path}")
        for row in reader:
            try:
                out[row[key]] = np.array([float(row[c]) for c in cols])
            except ValueError as exc:
                raise DataError(f"{path}: non-numeric feature for {row[key]!r}: {exc}") from None
    return out


def _ordered(events: Sequence[InteractionEvent]) -> list[int]:
    # stable sort keeps file order among equal timestamps
    return sorted(range(len(events)), key=lambda k: events[k].timestamp)


def build_sequences(events: Sequence[InteractionEvent]) -> dict[str, BehaviorSequence]:
    """Per-user clicked items in time order (non-clicks are not consumptions)."""
    items: dict[str, list[str]] = defaultdict(list)
    stamps: dict[str, list[int]] = defaultdict(list)
    seen_users: list[str] = []
    for k in _ordered(events):
        e = events[k]
        if e.user_id not in items:
            seen_users.append(e.user_id)
            items[e.user_id]
        if e.label == 1:
            items[e.user_id].append(e.item_id)
            stamps[e.user_id].append(e.timestamp)
    return {u: BehaviorSequence(u, tuple(items[u]), tuple(stamps[u])) for u in seen_users}


def session_window(seq: BehaviorSequence, at: int, cfg: SessionConfig = SessionConfig()) -> list[str]:
    """The ``window_k`` most recent consumptions strictly before ``at``."""
    end = int(np.searchsorted(np.asarray(seq.timestamps, dtype=np.int64), at, side="left"))
    return list(seq.items[max(0, end - cfg.window_k):end])


def split_time_stratified(events: Sequence[InteractionEvent], folds: int = 1, test_fraction: float = 0.2,
                          by: str = "user") -> list[tuple[list[InteractionEvent], list[InteractionEvent]]]:
    """Rolling-origin chronological splits.

    Fold ``j`` tests on the ``j``-th of ``folds`` consecutive trailing windows
    (each ``test_fraction`` of the events) and trains on everything earlier.
    With ``by="user"`` the cut is made inside each user's own timeline,
    with ``by="global"`` on the pooled timeline.
    """
    if folds < 1:
        raise DataError(f"folds must be >= 1, got {folds}")
    if not 0 < test_fraction < 1:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if by not in ("user", "global"):
        raise DataError(f"unknown split mode {by!r}")

    groups: list[list[int]]
    order = _ordered(events)
    if by == "global":
        groups = [order]
    else:
        per_user: dict[str, list[int]] = defaultdict(list)
        for k in order:
            per_user[events[k].user_id].append(k)
        groups = list(per_user.values())

    splits = []
    for j in range(folds):
        train_idx: list[int] = []
        test_idx: list[int] = []
        for g in groups:
            n = len(g)
            n_test = int(math.floor(n * test_fraction + 1e-9))
            cut = n - (folds - j) * n_test
            if n_test == 0 or cut < 1:
                if by == "global":
                    raise DataError(f"{n} events are too few for {folds} folds at test_fraction={test_fraction}")
                train_idx.extend(g)
                continue
            train_idx.extend(g[:cut])
            test_idx.extend(g[cut:cut + n_test])
        if not test_idx:
            raise DataError("dataset too small to split: no test events")
        train_idx.sort()
        test_idx.sort()
        splits.append(([events[k] for k in train_idx], [events[k] for k in test_idx]))
    return splits


# ---------------------------------------------------------------- indexed view used by training


@dataclass
class Vocab:
    keys: list[str]
    index: dict[str, int]

    @classmethod
    def from_keys(cls, keys: Iterable[str]) -> "Vocab":
        ks = sorted(set(keys))
        return cls(ks, {k: i for i, k in enumerate(ks)})

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return key in self.index


@dataclass
class Catalog:
    """Entity vocabularies plus optional side features, fixed for a run."""

    users: Vocab
    items: Vocab
    user_features: np.ndarray  # [n_users, m], may have 0 columns
    item_features: np.ndarray  # [n_items, n]

    @classmethod
    def build(cls, events: Iterable[InteractionEvent],
              user_features: Mapping[str, np.ndarray] | None = None,
              item_features: Mapping[str, np.ndarray] | None = None) -> "Catalog":
        events = list(events)
        users = Vocab.from_keys(e.user_id for e in events)
        items = Vocab.from_keys(e.item_id for e in events)
        return cls(users, items, _feature_matrix(users, user_features), _feature_matrix(items, item_features))


def _feature_matrix(vocab: Vocab, feats: Mapping[str, np.ndarray] | None) -> np.ndarray:
    if not feats:
        return np.zeros((len(vocab), 0))
    dims = {len(v) for v in feats.values()}
    if len(dims) != 1:
        raise DataError(f"feature vectors disagree in dimension: {sorted(dims)}")
    dim = dims.pop()
    mat = np.zeros((len(vocab), dim))
    for k, i in vocab.index.items():
        if k in feats:
            mat[i] = feats[k]
    return mat


@dataclass
class IndexedEvents:
    """Column arrays of events mapped through a catalog, in time order."""

    user: np.ndarray
    item: np.ndarray
    label: np.ndarray
    timestamp: np.ndarray

    def __len__(self) -> int:
        return len(self.user)

    @classmethod
    def from_events(cls, events: Sequence[InteractionEvent], catalog: Catalog) -> "IndexedEvents":
        keep = [k for k in _ordered(events)
                if events[k].user_id in catalog.users and events[k].item_id in catalog.items]
        return cls(
            np.array([catalog.users.index[events[k].user_id] for k in keep], dtype=np.int64),
            np.array([catalog.items.index[events[k].item_id] for k in keep], dtype=np.int64),
            np.array([events[k].label for k in keep], dtype=np.int64),
            np.array([events[k].timestamp for k in keep], dtype=np.int64),
        )

    def subset(self, mask_or_idx) -> "IndexedEvents":
        return IndexedEvents(self.user[mask_or_idx], self.item[mask_or_idx],
                             self.label[mask_or_idx], self.timestamp[mask_or_idx])


@dataclass
class History:
    """Per-user clicked items (catalog indices) sorted by time."""

    items: list[np.ndarray]
    times: list[np.ndarray]

    @classmethod
    def from_indexed(cls, ev: IndexedEvents, n_users: int) -> "History":
        items: list[list[int]] = [[] for _ in range(n_users)]
        times: list[list[int]] = [[] for _ in range(n_users)]
        for u, i, y, t in zip(ev.user, ev.item, ev.label, ev.timestamp):
            if y == 1:
                items[u].append(i)
                times[u].append(t)
        return cls([np.array(x, dtype=np.int64) for x in items], [np.array(x, dtype=np.int64) for x in times])

    def before(self, user: int, at: int | None) -> np.ndarray:
        """Consumptions strictly before ``at`` (all of them when ``at`` is None)."""
        if at is None:
            return self.items[user]
        end = int(np.searchsorted(self.times[user], at, side="left"))
        return self.items[user][:end]


def holdout_tail(ev: IndexedEvents, fraction: float) -> tuple[IndexedEvents, IndexedEvents]:
    """Move each user's latest ``fraction`` of events into a validation slice."""
    if fraction <= 0:
        return ev, ev.subset(np.zeros(len(ev), dtype=bool))
    val = np.zeros(len(ev), dtype=bool)
    for u in np.unique(ev.user):
        pos = np.flatnonzero(ev.user == u)
        n_val = int(math.floor(len(pos) * fraction))
        if n_val and len(pos) - n_val >= 1:
            val[pos[-n_val:]] = True
    return ev.subset(~val), ev.subset(val)


def make_synthetic_world(n_users: int = 20, n_items: int = 50, events_per_user: int = 30, dim: int = 4,
                         seed: int = 0) -> tuple[list[InteractionEvent], dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Events whose labels follow a fixed linear rule, plus the feature vectors behind it.

    Users and items get random feature vectors ``p_u`` and ``q_i``; the user
    clicks iff ``w . [p_u ; q_i] > 0`` for one fixed random ``w``, so the
    labels are linearly separable in the concatenated features.  Timestamps
    are distinct and increasing.
    """
    rng = np.random.default_rng(seed)
    pu = rng.normal(size=(n_users, dim))
    qi = rng.normal(size=(n_items, dim))
    w = rng.normal(size=2 * dim)
    events = []
    t = 0
    for u in range(n_users):
        for i in rng.choice(n_items, size=min(events_per_user, n_items), replace=False):
            t += 1
            label = int(np.concatenate([pu[u], qi[i]]) @ w > 0)
            events.append(InteractionEvent(f"u{u}", f"i{i}", label, t, float(label) * 4 + 1))
    return events, {f"u{u}": pu[u] for u in range(n_users)}, {f"i{i}": qi[i] for i in range(n_items)}


def make_synthetic(n_users: int = 20, n_items: int = 50, events_per_user: int = 30, dim: int = 4,
                   seed: int = 0) -> list[InteractionEvent]:
    """The events of :func:`make_synthetic_world` alone."""
    return make_synthetic_world(n_users, n_items, events_per_user, dim, seed)[0]

"""MovieLens-100k conversion and loading.

The raw files are not redistributed with the package.  ``scripts/fetch_movielens.py``
obtains them and calls :func:`convert_movielens`, which writes three CSVs:

* ``ratings.csv``: user_id, item_id, rating, timestamp
* ``items.csv``: item_id, year (scaled to [0, 1]), one 0/1 column per genre
* ``users.csv``: user_id, age (scaled to [0, 1]), gender_m, one 0/1 column per occupation
"""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import InteractionEvent, Schema, load_features, parse_interactions
from .errors import DataError

RATINGS = "ratings.csv"
ITEMS = "items.csv"
USERS = "users.csv"


def _read_atomic(path: Path) -> tuple[list[str], list[list[str]]]:
    """Tab-separated file whose header cells look like ``name:type``."""
    with open(path, newline="", encoding="latin-1") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows:
        raise DataError(f"{path} is empty")
    return [h.split(":")[0] for h in rows[0]], rows[1:]


def _find(src: Path, suffix: str) -> Path:
    hits = sorted(src.glob(f"*{suffix}"))
    if not hits:
        raise DataError(f"no *{suffix} file under {src}")
    return hits[0]


def _year(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return np.nan


def _scale(values: np.ndarray) -> np.ndarray:
    lo, hi = np.nanmin(values), np.nanmax(values)
    out = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    return np.nan_to_num(out, nan=0.5)


def convert_movielens(src: str | os.PathLike, out: str | os.PathLike) -> dict[str, int]:
    """Turn the atomic ``.inter``/``.item``/``.user`` files into the CSV layout above."""
    src, out = Path(src), Path(out)
    out.mkdir(parents=True, exist_ok=True)

    head, rows = _read_atomic(_find(src, ".inter"))
    col = {h: k for k, h in enumerate(head)}
    with open(out / RATINGS, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "rating", "timestamp"])
        for r in rows:
            w.writerow([r[col["user_id"]], r[col["item_id"]], r[col["rating"]], int(float(r[col["timestamp"]]))])

    head, rows = _read_atomic(_find(src, ".item"))
    col = {h: k for k, h in enumerate(head)}
    genres = sorted({g for r in rows for g in r[col["class"]].split()})
    years = np.array([_year(r[col["release_year"]]) for r in rows])
    years = _scale(years)
    with open(out / ITEMS, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "year"] + [f"genre_{g}" for g in genres])
        for r, y in zip(rows, years):
            have = set(r[col["class"]].split())
            w.writerow([r[col["item_id"]], f"{y:.6f}"] + [int(g in have) for g in genres])

    head, urows = _read_atomic(_find(src, ".user"))
    col = {h: k for k, h in enumerate(head)}
    occs = sorted({r[col["occupation"]] for r in urows})
    ages = _scale(np.array([float(r[col["age"]]) for r in urows]))
    with open(out / USERS, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "age", "gender_m"] + [f"occ_{o}" for o in occs])
        for r, a in zip(urows, ages):
            w.writerow([r[col["user_id"]], f"{a:.6f}", int(r[col["gender"]] == "M")]
                       + [int(r[col["occupation"]] == o) for o in occs])
    return {"events": sum(1 for _ in open(out / RATINGS)) - 1, "items": len(rows), "users": len(urows)}


def load_movielens(root: str | os.PathLike, threshold: float = 3.5, max_events: int | None = None,
                   ) -> tuple[list[InteractionEvent], dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Events (rating > threshold is a click) plus user and item side features.

    ``max_events`` keeps the earliest events in time, a subset that still has
    a proper chronological structure.
    """
    root = Path(root)
    if not (root / RATINGS).exists():
        raise DataError(f"{root / RATINGS} not found; run scripts/fetch_movielens.py first")
    events = parse_interactions(root / RATINGS, Schema(threshold=threshold)).events
    if max_events is not None and len(events) > max_events:
        events = sorted(events, key=lambda e: (e.timestamp, e.user_id, e.item_id))[:max_events]
    users = load_features(root / USERS, "user_id") if (root / USERS).exists() else {}
    items = load_features(root / ITEMS, "item_id") if (root / ITEMS).exists() else {}
    return events, users, items


def subsample_users(events: Sequence[InteractionEvent], n_users: int, seed: int = 0) -> list[InteractionEvent]:
    """All events of ``n_users`` users drawn without replacement."""
    ids = sorted({e.user_id for e in events})
    keep = set(np.random.default_rng(seed).choice(ids, size=min(n_users, len(ids)), replace=False).tolist())
    return [e for e in events if e.user_id in keep]

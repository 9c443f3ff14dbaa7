"""AUC, HR@k, coverage and mean unexpectedness, plus report formatting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError
from .unexpectedness import InterestCluster, unexpectedness


@dataclass
class MetricsReport:
    auc: float
    hr_at_10: float
    mean_unexpectedness: float
    coverage: float
    n_users: int
    n_events: int
    n_skipped: int = 0
    variant: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("auc", "hr_at_10", "coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} outside [0, 1]")
        if self.mean_unexpectedness < 0:
            raise MetricError(f"mean_unexpectedness={self.mean_unexpectedness} is negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(**d)

    def to_text(self) -> str:
        return format_table([self])


COLUMNS = ("AUC", "HR@10", "Unexp", "Coverage")


def format_table(reports: Sequence[MetricsReport], labels: Sequence[str] | None = None) -> str:
    """Aligned plain-text table, one row per report."""
    labels = list(labels) if labels is not None else [r.variant or "model" for r in reports]
    width = max([len("Model")] + [len(x) for x in labels])
    lines = [f"{'Model':<{width}}  " + "  ".join(f"{c:>8}" for c in COLUMNS)]
    for lab, r in zip(labels, reports):
        vals = (r.auc, r.hr_at_10, r.mean_unexpectedness, r.coverage)
        lines.append(f"{lab:<{width}}  " + "  ".join(f"{v:>8.4f}" for v in vals))
    return "\n".join(lines)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score of a random positive > score of a random negative), ties half.

    Computed from the Mann-Whitney rank sum with mid-ranks for ties.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise MetricError(f"{s.shape[0]} scores but {y.shape[0]} labels")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def hr_at_k(ranked_lists: Sequence[Sequence], held_out: Sequence, k: int = 10) -> float:
    """Fraction of cases whose held-out item is in the first ``k`` of its ranking.

    Cases with ``held_out`` None are skipped; with no usable case the result is 0.
    """
    hits = total = 0
    for ranked, target in zip(ranked_lists, held_out):
        if target is None:
            continue
        total += 1
        hits += target in list(ranked[:k])
    return hits / total if total else 0.0


def hr_at_10(ranked_lists: Sequence[Sequence], held_out: Sequence) -> float:
    return hr_at_k(ranked_lists, held_out, 10)


def coverage(recommended: Iterable[Sequence], catalog: Iterable) -> float:
    """Distinct recommended catalog items over catalog size."""
    cat = set(catalog)
    if not cat:
        raise MetricError("coverage needs a nonempty catalog")
    seen: set = set()
    for lst in recommended:
        seen.update(lst)
    return len(seen & cat) / len(cat)


def mean_unexpectedness(recommended: Mapping, clusters: Mapping, embeddings) -> float:
    """Average cluster-weighted unexpectedness over all recommended (user, item) pairs.

    ``embeddings[item]`` gives the item vector.  Users without clusters
    contribute 0 per pair.
    """
    total = 0.0
    n = 0
    for user, items in recommended.items():
        cl: Sequence[InterestCluster] = clusters.get(user) or []
        for item in items:
            total += unexpectedness(embeddings[item], cl) if cl else 0.0
            n += 1
    return total / n if n else 0.0

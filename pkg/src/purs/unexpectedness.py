"""Interest clusters by Gaussian mean shift and cluster-weighted unexpectedness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from . import numerics as nx
from .errors import ContractError
from .numerics import Tensor


@dataclass(frozen=True)
class MeanShiftConfig:
    """``bandwidth_c`` is the coefficient in exp(-c * ||x_i - x||^2).

    ``None`` picks it per call with the median heuristic.
    """

    bandwidth_c: float | None = None
    convergence_tol: float = 1e-4
    max_iters: int = 300
    mode_merge_tol: float | None = None

    def __post_init__(self):
        for name in ("bandwidth_c", "convergence_tol", "mode_merge_tol"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ContractError(f"{name} must be positive, got {v}")
        if self.max_iters < 1:
            raise ContractError(f"max_iters must be positive, got {self.max_iters}")

    @property
    def merge_tol(self) -> float:
        return self.convergence_tol * 10 if self.mode_merge_tol is None else self.mode_merge_tol


@dataclass
class InterestCluster:
    centroid: np.ndarray
    size: int
    member_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.size < 1 or self.size != len(self.member_indices):
            raise ContractError(f"cluster size {self.size} disagrees with {len(self.member_indices)} members")


def median_bandwidth(points: np.ndarray) -> float:
    """c = 1 / (2 * median^2) of the pairwise distances (1.0 when degenerate)."""
    if len(points) < 2:
        return 1.0
    med = float(np.median(pdist(points)))
    return 1.0 / (2.0 * med * med) if med > 0 else 1.0


def mean_shift(points, cfg: MeanShiftConfig = MeanShiftConfig()) -> list[InterestCluster]:
    """Move every point uphill on the Gaussian KDE until it stops, then group modes.

    Points whose modes lie within ``cfg.merge_tol`` of each other (transitively)
    form one cluster; its centroid is the mean of those modes.  Clusters come
    back ordered by their smallest member index.
    """
    X = np.asarray([getattr(p, "vector", p) for p in points], dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if n == 0:
        raise ContractError("mean_shift needs at least one point")
    c = median_bandwidth(X) if cfg.bandwidth_c is None else cfg.bandwidth_c

    modes = X.copy()
    active = np.arange(n)
    sq_x = (X * X).sum(axis=1)
    for _ in range(cfg.max_iters):
        if active.size == 0:
            break
        cur = modes[active]
        d2 = (cur * cur).sum(axis=1)[:, None] + sq_x[None, :] - 2.0 * cur @ X.T
        np.maximum(d2, 0.0, out=d2)
        logk = -c * d2
        # subtracting the row max keeps the weights representable for tight kernels
        logk -= logk.max(axis=1, keepdims=True)
        k = np.exp(logk)
        new = (k @ X) / k.sum(axis=1, keepdims=True)
        step = np.sqrt(((new - cur) ** 2).sum(axis=1))
        modes[active] = new
        active = active[step >= cfg.convergence_tol]

    if n == 1:
        labels = np.zeros(1, dtype=int)
    else:
        adj = squareform(pdist(modes)) <= cfg.merge_tol
        _, labels = connected_components(adj, directed=False)
    clusters = []
    seen: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab not in seen:
            seen[lab] = len(clusters)
            clusters.append([])
        clusters[seen[lab]].append(i)
    return [InterestCluster(modes[m].mean(axis=0), len(m), m) for m in clusters]


def single_closure(points) -> list[InterestCluster]:
    """All points as one cluster centred on their mean (no clustering)."""
    X = np.asarray([getattr(p, "vector", p) for p in points], dtype=float)
    if len(X) == 0:
        raise ContractError("single_closure needs at least one point")
    return [InterestCluster(X.mean(axis=0), len(X), list(range(len(X))))]


def cluster_arrays(clusters: Sequence[InterestCluster]) -> tuple[np.ndarray, np.ndarray]:
    """(centroids [C, d], size weights summing to one [C])."""
    cent = np.stack([cl.centroid for cl in clusters])
    sizes = np.array([cl.size for cl in clusters], dtype=float)
    return cent, sizes / sizes.sum()


def unexpectedness(w_star, clusters: Sequence[InterestCluster], distance: str = "centroid") -> float:
    """Size-weighted mean distance from ``w_star`` to each interest cluster.

    ``distance="min_member"`` needs the member positions and is only usable
    through :func:`unexpectedness_to_members`.
    """
    if not clusters:
        raise ContractError("unexpectedness needs at least one cluster")
    if distance != "centroid":
        raise ContractError(f"unsupported cluster distance {distance!r}")
    w = np.asarray(getattr(w_star, "vector", w_star), dtype=float)
    cent, weights = cluster_arrays(clusters)
    return float(weights @ np.sqrt(((cent - w) ** 2).sum(axis=1)))


def unexpectedness_to_members(w_star, clusters: Sequence[InterestCluster], points) -> float:
    """Variant of the distance using the nearest member of each cluster."""
    if not clusters:
        raise ContractError("unexpectedness needs at least one cluster")
    w = np.asarray(getattr(w_star, "vector", w_star), dtype=float)
    X = np.asarray([getattr(p, "vector", p) for p in points], dtype=float)
    total = sum(cl.size for cl in clusters)
    return float(sum(np.sqrt(((X[cl.member_indices] - w) ** 2).sum(axis=1)).min() * cl.size / total
                     for cl in clusters))


def batch_unexpectedness(E_i, centroids: np.ndarray, weights: np.ndarray) -> Tensor:
    """Differentiable version over a batch.

    ``E_i`` is [B, d]; ``centroids`` [B, C, d] and ``weights`` [B, C] are
    constants (zero weight marks padding).  Rows without clusters give 0.
    """
    E_i = nx.as_tensor(E_i)
    B, d = E_i.shape
    diff = nx.sub(nx.reshape(E_i, (B, 1, d)), Tensor(centroids))
    return nx.sum_(nx.mul(nx.norm(diff, axis=-1), Tensor(weights)), axis=-1)


def unexp_activation(x):
    """f(x) = x * exp(-x) for x >= 0; works on floats, arrays and Tensors."""
    if isinstance(x, Tensor):
        if np.any(x.data < 0):
            raise ContractError("unexpectedness must be non-negative")
        return nx.mul(x, nx.exp(nx.scale(x, -1.0)))
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0):
        raise ContractError("unexpectedness must be non-negative")
    out = arr * np.exp(-arr)
    return float(out) if out.ndim == 0 else out


def gaussian_activation(x):
    """exp(-x^2), the alternative activation of one ablation variant."""
    if isinstance(x, Tensor):
        return nx.exp(nx.scale(nx.square(x), -1.0))
    out = np.exp(-np.asarray(x, dtype=float) ** 2)
    return float(out) if out.ndim == 0 else out


def kurtosis(samples) -> float:
    """Standardised fourth central moment m4 / m2^2 (a normal gives 3)."""
    x = np.asarray(samples, dtype=float)
    if x.size < 4:
        raise ContractError(f"kurtosis needs at least 4 samples, got {x.size}")
    dev = x - x.mean()
    m2 = (dev ** 2).mean()
    if m2 == 0:
        raise ContractError("kurtosis undefined for zero variance")
    return float((dev ** 4).mean() / (m2 * m2))

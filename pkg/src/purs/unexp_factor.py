"""Session-aware unexpectedness factor via a local activation unit."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .numerics import Mlp, Tensor


class LocalActivationParams(Mlp):
    """Scores one history item from ``[E_u, E_h, E_i, E_h*E_i, E_h-E_i]``."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int = 36, prefix: str = "la",
                 scale: float = 0.05, normalize: bool = False):
        super().__init__([5 * dim, hidden, 1], rng, prefix, activation="relu", scale=scale)
        self.normalize = normalize


class FactorHeadParams(Mlp):
    """MLP over ``[E_u; pooled window; E_i]`` with hidden sizes 32 and 64."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden=(32, 64), prefix: str = "factor",
                 scale: float = 0.05):
        super().__init__([3 * dim, *hidden, 1], rng, prefix, scale=scale)


def _scorer_input(E_u: Tensor, E_hist: Tensor, E_i: Tensor) -> Tensor:
    return nx.concat([E_u, E_hist, E_i, nx.mul(E_hist, E_i), nx.sub(E_hist, E_i)], axis=-1)


def local_activation(E_u, E_hist, E_i, params: LocalActivationParams) -> Tensor:
    """Unnormalised relevance weight of each history item (trailing dims broadcast)."""
    E_u, E_hist, E_i = nx.as_tensor(E_u), nx.as_tensor(E_hist), nx.as_tensor(E_i)
    if not E_u.shape[-1] == E_hist.shape[-1] == E_i.shape[-1]:
        raise ContractError(f"embedding dims differ: {E_u.shape}, {E_hist.shape}, {E_i.shape}")
    shape = np.broadcast_shapes(E_u.shape, E_hist.shape, E_i.shape)
    parts = [nx.broadcast_to(t, shape) if t.shape != shape else t for t in (E_u, E_hist, E_i)]
    out = params(_scorer_input(*parts))
    return nx.reshape(out, out.shape[:-1])


def pool_window(E_u, window, mask, E_i, la: LocalActivationParams) -> Tensor:
    """Weighted sum of window embeddings [B, K, d] -> [B, d]; masked slots ignored."""
    E_u, window, E_i = nx.as_tensor(E_u), nx.as_tensor(window), nx.as_tensor(E_i)
    B, K, d = window.shape
    if K == 0:
        return Tensor(np.zeros((B, d)))
    m = np.ones((B, K)) if mask is None else np.asarray(mask, dtype=float).reshape(B, K)
    w = local_activation(nx.reshape(E_u, (B, 1, d)), window, nx.reshape(E_i, (B, 1, d)), la)
    if la.normalize:
        w = nx.softmax(w, axis=-1, mask=m.astype(bool))
    else:
        w = nx.mul(w, Tensor(m))
    return nx.reshape(nx.matmul(nx.reshape(w, (B, 1, K)), window), (B, d))


def unexp_factor(E_u, window, mask, E_i, la: LocalActivationParams, head: FactorHeadParams,
                 window_k: int | None = None) -> Tensor:
    """sigmoid(MLP([E_u; sum_j a(E_u, E_j, E_i) E_j; E_i])), one value per row."""
    window = nx.as_tensor(window)
    if window_k is not None and window.shape[1] > window_k:
        raise ContractError(f"window holds {window.shape[1]} items, more than K={window_k}")
    pooled = pool_window(E_u, window, mask, E_i, la)
    logit = head(nx.concat([nx.as_tensor(E_u), pooled, nx.as_tensor(E_i)], axis=-1))
    return nx.sigmoid(nx.reshape(logit, logit.shape[:-1]))

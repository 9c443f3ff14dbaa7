"""User and item embeddings from per-class MLP autoencoders.

A feature vector is ``[side features ; one-hot id]`` where either part may be
empty.  The one-hot block is never materialised on the encoder side: its
first-layer weights are read as a lookup table, which is the same product.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .numerics import SgdConfig, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureVector:
    owner: str
    values: np.ndarray


@dataclass(frozen=True)
class Embedding:
    owner: str
    vector: np.ndarray


@dataclass
class AutoencoderParams:
    kind: str
    n_dense: int
    n_ids: int
    enc_dense: Tensor | None
    enc_id: Tensor | None
    enc_b1: Tensor
    enc_w2: Tensor
    enc_b2: Tensor
    dec_w1: Tensor
    dec_b1: Tensor
    dec_w2: Tensor
    dec_b2: Tensor
    activation: str = "tanh"

    @classmethod
    def init(cls, kind: str, n_dense: int, n_ids: int, rng: np.random.Generator, dim: int = 32,
             hidden: int = 64, scale: float | None = 0.05) -> "AutoencoderParams":
        """``scale=None`` draws each layer from the Glorot uniform range instead."""
        if kind not in ("user", "item"):
            raise ContractError(f"autoencoder class must be 'user' or 'item', got {kind!r}")
        if n_dense + n_ids == 0:
            raise ContractError("autoencoder needs at least one input feature")
        p = f"ae_{kind}."
        feat = n_dense + n_ids

        def lim(fan_in, fan_out):
            return math.sqrt(6.0 / (fan_in + fan_out)) if scale is None else scale

        return cls(
            kind, n_dense, n_ids,
            nx.uniform_param(rng, (n_dense, hidden), lim(feat, hidden), p + "enc_dense") if n_dense else None,
            nx.uniform_param(rng, (n_ids, hidden), lim(feat, hidden), p + "enc_id") if n_ids else None,
            nx.zeros_param((hidden,), p + "enc_b1"),
            nx.uniform_param(rng, (hidden, dim), lim(hidden, dim), p + "enc_w2"),
            nx.zeros_param((dim,), p + "enc_b2"),
            nx.uniform_param(rng, (dim, hidden), lim(dim, hidden), p + "dec_w1"),
            nx.zeros_param((hidden,), p + "dec_b1"),
            nx.uniform_param(rng, (hidden, feat), lim(hidden, feat), p + "dec_w2"),
            nx.zeros_param((feat,), p + "dec_b2"),
        )

    @property
    def feature_dim(self) -> int:
        return self.n_dense + self.n_ids

    @property
    def dim(self) -> int:
        return self.enc_w2.shape[1]

    def encoder_tensors(self) -> list[Tensor]:
        return [t for t in (self.enc_dense, self.enc_id, self.enc_b1, self.enc_w2, self.enc_b2) if t is not None]

    def decoder_tensors(self) -> list[Tensor]:
        return [self.dec_w1, self.dec_b1, self.dec_w2, self.dec_b2]

    def tensors(self) -> list[Tensor]:
        return self.encoder_tensors() + self.decoder_tensors()

    def _act(self, x: Tensor) -> Tensor:
        return nx.tanh(x) if self.activation == "tanh" else x


def encode_rows(params: AutoencoderParams, dense: np.ndarray | None, ids: np.ndarray | None) -> Tensor:
    """Batched encoder: ``dense`` is [B, n_dense], ``ids`` is [B] entity indices."""
    pre = None
    if params.n_dense:
        if dense is None or dense.shape[-1] != params.n_dense:
            got = None if dense is None else dense.shape
            raise ContractError(f"{params.kind} encoder expects {params.n_dense} dense features, got {got}")
        pre = nx.matmul(Tensor(dense), params.enc_dense)
    if params.n_ids:
        if ids is None:
            raise ContractError(f"{params.kind} encoder needs entity ids")
        looked = nx.take(params.enc_id, ids)
        pre = looked if pre is None else nx.add(pre, looked)
    hidden = params._act(nx.add(pre, params.enc_b1))
    return nx.linear(hidden, params.enc_w2, params.enc_b2)


def _encode_full(params: AutoencoderParams, x: Tensor) -> Tensor:
    """Encoder on explicit (possibly non one-hot) full feature rows."""
    parts = [t for t in (params.enc_dense, params.enc_id) if t is not None]
    w1 = parts[0] if len(parts) == 1 else nx.concat(parts, axis=0)
    hidden = params._act(nx.linear(x, w1, params.enc_b1))
    return nx.linear(hidden, params.enc_w2, params.enc_b2)


def decode(params: AutoencoderParams, z: Tensor) -> Tensor:
    hidden = params._act(nx.linear(z, params.dec_w1, params.dec_b1))
    return nx.linear(hidden, params.dec_w2, params.dec_b2)


def encode(features: FeatureVector, params: AutoencoderParams) -> Embedding:
    x = np.asarray(features.values, dtype=float)
    if x.shape != (params.feature_dim,):
        raise ContractError(f"feature vector of length {x.shape} does not match encoder input {params.feature_dim}")
    with nx.no_grad():
        z = _encode_full(params, Tensor(x[None, :]))
    return Embedding(features.owner, z.data[0].copy())


def full_features(dense: np.ndarray | None, ids: np.ndarray | None, params: AutoencoderParams) -> np.ndarray:
    """Materialise ``[dense ; one-hot(ids)]`` rows as reconstruction targets."""
    n = len(ids) if ids is not None else len(dense)
    parts = []
    if params.n_dense:
        parts.append(np.asarray(dense, dtype=float))
    if params.n_ids:
        onehot = np.zeros((n, params.n_ids))
        onehot[np.arange(n), ids] = 1.0
        parts.append(onehot)
    return np.concatenate(parts, axis=1)


def reconstruction_loss(features: np.ndarray | FeatureVector, params: AutoencoderParams) -> Tensor:
    """Mean over rows of ``||x - dec(enc(x))||_2``."""
    if isinstance(features, FeatureVector):
        features = features.values
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[1] != params.feature_dim:
        raise ContractError(f"features have {x.shape[1]} columns, autoencoder expects {params.feature_dim}")
    recon = decode(params, _encode_full(params, Tensor(x)))
    return nx.mean(nx.norm(nx.sub(Tensor(x), recon), axis=-1))


def _batch_loss(params: AutoencoderParams, dense: np.ndarray | None, ids: np.ndarray | None) -> Tensor:
    target = full_features(dense, ids, params)
    recon = decode(params, encode_rows(params, dense, ids))
    return nx.mean(nx.norm(nx.sub(Tensor(target), recon), axis=-1))


def pretrain(params: AutoencoderParams, dense: np.ndarray | None, epochs: int, sgd: SgdConfig,
             rng: np.random.Generator, batch_size: int = 32) -> list[float]:
    """Minimise reconstruction loss over all entities; returns per-epoch mean loss.

    Entity ``k`` has dense row ``dense[k]`` and id ``k``.  Parameters are
    updated in place.
    """
    n = len(dense) if params.n_dense else params.n_ids
    if n == 0:
        raise ContractError("pretraining needs at least one entity")
    history = []
    tensors = params.tensors()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = _batch_loss(params, dense[idx] if params.n_dense else None, idx if params.n_ids else None)
            nx.backward(loss)
            nx.sgd_step([t for t in tensors if t.grad is not None], sgd, epoch)
            total += loss.item() * len(idx)
        history.append(total / n)
        log.debug("%s autoencoder epoch %d loss %.5f", params.kind, epoch, history[-1])
    return history


def all_embeddings(params: AutoencoderParams, dense: np.ndarray | None) -> np.ndarray:
    """Embeddings of every entity, as a plain array [n, dim]."""
    n = len(dense) if params.n_dense else params.n_ids
    with nx.no_grad():
        z = encode_rows(params, dense if params.n_dense else None, np.arange(n) if params.n_ids else None)
    return z.data

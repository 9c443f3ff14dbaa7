"""CTR estimate from a self-attentive bidirectional GRU over the click history.

Matrices act on row vectors (``x @ W``), so ``W_z`` here is the transpose of
the column-vector form; the recurrences are otherwise the textbook GRU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .numerics import Mlp, Tensor

GATES = ("z", "r", "h")


@dataclass
class GruParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, prefix: str = "gru", scale: float = 0.05) -> "GruParams":
        kw = {}
        for g in GATES:
            kw[f"W_{g}"] = nx.uniform_param(rng, (dim, dim), scale, f"{prefix}.W_{g}")
        for g in GATES:
            kw[f"U_{g}"] = nx.uniform_param(rng, (dim, dim), scale, f"{prefix}.U_{g}")
        for g in GATES:
            kw[f"b_{g}"] = nx.zeros_param((dim,), f"{prefix}.b_{g}")
        return cls(**kw)

    @property
    def dim(self) -> int:
        return self.U_z.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.W_z, self.W_r, self.W_h, self.U_z, self.U_r, self.U_h, self.b_z, self.b_r, self.b_h]


@dataclass
class AttentionParams:
    """``W_t`` transforms values; ``W_q``/``W_k`` feed the dot-product compatibility."""

    W_t: Tensor
    W_q: Tensor
    W_k: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, prefix: str = "attn", scale: float = 0.05) -> "AttentionParams":
        return cls(*(nx.uniform_param(rng, (dim, dim), scale, f"{prefix}.{n}") for n in ("W_t", "W_q", "W_k")))

    def tensors(self) -> list[Tensor]:
        return [self.W_t, self.W_q, self.W_k]


class CtrHeadParams(Mlp):
    """MLP over ``[R_u; E_u; E_i]`` with hidden sizes 32 and 64."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden=(32, 64), prefix: str = "ctr", scale: float = 0.05):
        super().__init__([4 * dim, *hidden, 1], rng, prefix, scale=scale)


def gru_cell(x_t, h_prev, params: GruParams) -> Tensor:
    """One GRU step composed from primitive ops (reference path)."""
    x_t, h_prev = nx.as_tensor(x_t), nx.as_tensor(h_prev)
    if x_t.ndim == 1 and h_prev.ndim == 1:
        return nx.reshape(gru_cell(nx.reshape(x_t, (1, -1)), nx.reshape(h_prev, (1, -1)), params), (-1,))
    d = params.dim
    if x_t.shape[-1] != params.W_z.shape[0] or h_prev.shape[-1] != d:
        raise DimensionError(f"gru_cell: x {x_t.shape}, h {h_prev.shape} vs hidden size {d}")
    z = nx.sigmoid(nx.add(nx.add(nx.matmul(x_t, params.W_z), nx.matmul(h_prev, params.U_z)), params.b_z))
    r = nx.sigmoid(nx.add(nx.add(nx.matmul(x_t, params.W_r), nx.matmul(h_prev, params.U_r)), params.b_r))
    cand = nx.tanh(nx.add(nx.add(nx.matmul(x_t, params.W_h), nx.matmul(nx.mul(r, h_prev), params.U_h)), params.b_h))
    return nx.add(nx.mul(nx.sub(1.0, z), h_prev), nx.mul(z, cand))


def gru_sequence(x, mask, params: GruParams) -> Tensor:
    """Run the GRU over ``x`` [B, L, d_in] from a zero state; returns all states [B, L, d].

    Steps with ``mask == 0`` leave the state unchanged, so padding may sit
    anywhere.  Gradients come from a hand-written backprop-through-time.
    """
    x = nx.as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"gru_sequence expects [batch, length, dim], got {x.shape}")
    B, L, d_in = x.shape
    d = params.dim
    if d_in != params.W_z.shape[0]:
        raise DimensionError(f"gru_sequence: input dim {d_in} vs weights {params.W_z.shape}")
    m = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=float).reshape(B, L)

    W = np.concatenate([params.W_z.data, params.W_r.data, params.W_h.data], axis=1)
    b = np.concatenate([params.b_z.data, params.b_r.data, params.b_h.data])
    Uz, Ur, Uh = params.U_z.data, params.U_r.data, params.U_h.data
    XP = x.data @ W + b

    H = np.empty((B, L, d))
    hp_s = np.empty((L, B, d))
    z_s = np.empty((L, B, d))
    r_s = np.empty((L, B, d))
    c_s = np.empty((L, B, d))
    h = np.zeros((B, d))
    for t in range(L):
        xp = XP[:, t]
        z = 1.0 / (1.0 + np.exp(-(xp[:, :d] + h @ Uz)))
        r = 1.0 / (1.0 + np.exp(-(xp[:, d:2 * d] + h @ Ur)))
        c = np.tanh(xp[:, 2 * d:] + (r * h) @ Uh)
        hp_s[t], z_s[t], r_s[t], c_s[t] = h, z, r, c
        mt = m[:, t, None]
        h = h + mt * (z * (c - h))
        H[:, t] = h

    parents = [x] + params.tensors()

    def bw(gH):
        dXP = np.empty((B, L, 3 * d))
        dUz = np.zeros((d, d))
        dUr = np.zeros((d, d))
        dUh = np.zeros((d, d))
        dh = np.zeros((B, d))
        for t in range(L - 1, -1, -1):
            hp, z, r, c = hp_s[t], z_s[t], r_s[t], c_s[t]
            mt = m[:, t, None]
            g = gH[:, t] + dh
            dn = mt * g
            dhp = g - dn + dn * (1.0 - z)
            dz = dn * (c - hp)
            dah = dn * z * (1.0 - c * c)
            rh = r * hp
            dUh += rh.T @ dah
            drh = dah @ Uh.T
            dhp += drh * r
            daz = dz * z * (1.0 - z)
            dar = drh * hp * r * (1.0 - r)
            dUz += hp.T @ daz
            dUr += hp.T @ dar
            dhp += daz @ Uz.T + dar @ Ur.T
            dXP[:, t, :d] = daz
            dXP[:, t, d:2 * d] = dar
            dXP[:, t, 2 * d:] = dah
            dh = dhp
        flat = dXP.reshape(-1, 3 * d)
        dW = x.data.reshape(-1, d_in).T @ flat
        db = flat.sum(axis=0)
        dx = dXP @ W.T if x.requires_grad else None
        return (dx, dW[:, :d], dW[:, d:2 * d], dW[:, 2 * d:], dUz, dUr, dUh, db[:d], db[d:2 * d], db[2 * d:])

    return nx.custom_op(H, parents, bw, "gru_sequence")


def attention_weights(H, mask, attn: AttentionParams) -> Tensor:
    """Full self-attention matrix alpha[b, t, i] over valid positions."""
    H = nx.as_tensor(H)
    B, L, d = H.shape
    q = nx.matmul(H, attn.W_q)
    k = nx.matmul(H, attn.W_k)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    m = np.ones((B, 1, L), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, 1, L)
    return nx.softmax(scores, axis=-1, mask=m)


def self_attention(H, mask, attn: AttentionParams) -> tuple[Tensor, Tensor]:
    """Attention-pool states into one vector per row, queried by the final state.

    Returns ``(pooled [B, d], weights [B, L])``; rows with no valid position
    pool to zeros.
    """
    H = nx.as_tensor(H)
    B, L, d = H.shape
    values = nx.matmul(H, attn.W_t)
    keys = nx.matmul(H, attn.W_k)
    query = nx.matmul(nx.reshape(nx.getitem(H, (slice(None), slice(L - 1, L))), (B, 1, d)), attn.W_q)
    scores = nx.scale(nx.reshape(nx.matmul(keys, nx.transpose(query, (0, 2, 1))), (B, L)), 1.0 / math.sqrt(d))
    m = np.ones((B, L), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, L)
    alpha = nx.softmax(scores, axis=-1, mask=m)
    pooled = nx.reshape(nx.matmul(nx.reshape(alpha, (B, 1, L)), values), (B, d))
    return pooled, alpha


def encode_sequence(seq, mask, gru_fwd: GruParams, gru_bwd: GruParams, attn: AttentionParams) -> Tensor:
    """User interest vector R_u [B, 2d] from item embeddings ``seq`` [B, L, d].

    Sequences are expected left-padded (valid items last).  The backward pass
    reads the sequence reversed; each direction is attention-pooled with the
    query taken from its last processed step, then the two are concatenated.
    """
    seq = nx.as_tensor(seq)
    if seq.ndim == 2:
        seq = nx.reshape(seq, (1,) + seq.shape)
    B, L, _ = seq.shape
    m = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=float).reshape(B, L)
    if L == 0:
        return Tensor(np.zeros((B, 2 * gru_fwd.dim)))
    fwd = gru_sequence(seq, m, gru_fwd)
    rev = np.arange(L)[::-1]
    bwd = gru_sequence(nx.take(seq, rev, axis=1), m[:, rev], gru_bwd)
    pf, _ = self_attention(fwd, m, attn)
    pb, _ = self_attention(bwd, m[:, rev], attn)
    return nx.concat([pf, pb], axis=-1)


def predict_ctr(E_u, E_i, R_u, head: CtrHeadParams) -> Tensor:
    """sigmoid(MLP([R_u; E_u; E_i])), one probability per row."""
    E_u, E_i, R_u = nx.as_tensor(E_u), nx.as_tensor(E_i), nx.as_tensor(R_u)
    if E_u.ndim == E_i.ndim == R_u.ndim == 1:
        return nx.reshape(predict_ctr(*(nx.reshape(t, (1, -1)) for t in (E_u, E_i, R_u)), head), ())
    x = nx.concat([R_u, E_u, E_i], axis=-1)
    if x.shape[-1] != head.sizes[0]:
        raise ContractError(f"CTR head expects {head.sizes[0]} inputs, got {x.shape[-1]}")
    logit = head(x)
    return nx.sigmoid(nx.reshape(logit, logit.shape[:-1]))

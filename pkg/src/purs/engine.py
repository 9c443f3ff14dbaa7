"""Hybrid-utility model: assembly, joint training, ranking, evaluation, checkpoints."""

from __future__ import annotations

import copy
import enum
import json
import logging
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .base_model import AttentionParams, CtrHeadParams, GruParams, encode_sequence, predict_ctr
from .data import Catalog, History, IndexedEvents, InteractionEvent, holdout_tail
from .embeddings import AutoencoderParams, all_embeddings, encode_rows, pretrain
from .errors import CheckpointError, ContractError, TrainingError, VersionError
from .metrics import MetricsReport, auc, coverage, hr_at_k
from .numerics import SgdConfig, Tensor
from .unexp_factor import FactorHeadParams, LocalActivationParams, unexp_factor
from .unexpectedness import (
    MeanShiftConfig,
    batch_unexpectedness,
    cluster_arrays,
    gaussian_activation,
    mean_shift,
    single_closure,
    unexp_activation,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MAGIC = b"PURSCKPT"
SCORE_CHUNK = 2048


class VariantId(str, enum.Enum):
    FULL = "FULL"
    V1_GAUSSIAN = "V1_GAUSSIAN"
    V2_NO_ACTIVATION = "V2_NO_ACTIVATION"
    V3_NO_FACTOR = "V3_NO_FACTOR"
    V4_NO_UNEXP = "V4_NO_UNEXP"
    V5_SINGLE_CLOSURE = "V5_SINGLE_CLOSURE"

    @property
    def uses_unexp(self) -> bool:
        return self is not VariantId.V4_NO_UNEXP

    @property
    def uses_factor(self) -> bool:
        return self not in (VariantId.V3_NO_FACTOR, VariantId.V4_NO_UNEXP)

    @property
    def uses_bias(self) -> bool:
        return self not in (VariantId.FULL, VariantId.V5_SINGLE_CLOSURE)


def parse_variant(name: str | VariantId) -> VariantId:
    if isinstance(name, VariantId):
        return name
    key = str(name).upper()
    for v in VariantId:
        if key == v.value or key == v.value.split("_")[0]:
            return v
    raise ContractError(f"unknown variant {name!r}; choose from {[v.value for v in VariantId]}")


def utility(r, unexp, factor, variant: VariantId | str = VariantId.FULL, b_u=0.0, b_i=0.0) -> Tensor:
    """Hybrid utility of one or many (user, item) pairs.

    FULL is ``r + f(unexp) * factor``; the ablations swap or drop the
    activation and factor and add the bias terms.  For V5 the caller passes
    single-closure unexpectedness; the formula is FULL's.
    """
    variant = parse_variant(variant)
    r = nx.as_tensor(r)
    if variant is VariantId.V4_NO_UNEXP:
        return nx.add(nx.add(nx.as_tensor(b_u), nx.as_tensor(b_i)), r)
    unexp = nx.as_tensor(unexp)
    if variant is VariantId.V1_GAUSSIAN:
        term = nx.mul(gaussian_activation(unexp), factor)
    elif variant is VariantId.V2_NO_ACTIVATION:
        term = nx.mul(unexp, factor)
    elif variant is VariantId.V3_NO_FACTOR:
        term = unexp_activation(unexp)
    else:
        term = nx.mul(unexp_activation(unexp), factor)
    out = nx.add(r, term)
    if variant.uses_bias:
        out = nx.add(nx.add(nx.as_tensor(b_u), nx.as_tensor(b_i)), out)
    return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    sgd: SgdConfig = SgdConfig()
    embedding_dim: int = 32
    window_k: int = 10
    seed: int = 0
    variant: VariantId = VariantId.FULL
    seq_cap: int = 50
    pretrain_epochs: int = 5
    pretrain_sgd: SgdConfig | None = None
    ae_hidden: int = 64
    init_scale: float = 0.05
    mlp_init: str = "glorot"
    ae_init: str = "uniform"
    use_id_features: bool = True
    validation_fraction: float = 0.1
    eval_users: int = 200
    eval_loss_events: int = 20000
    cluster_refresh: int = 1
    cluster_step: int = 10
    log_eval: bool = True
    mean_shift: MeanShiftConfig = MeanShiftConfig()
    la_normalize: bool = False
    calibrate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", parse_variant(self.variant))
        for name in ("batch_size", "embedding_dim", "window_k", "seq_cap", "ae_hidden", "cluster_refresh",
                     "cluster_step"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ContractError("epoch counts must be non-negative")
        if not 0 <= self.validation_fraction < 1:
            raise ContractError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")
        for name in ("mlp_init", "ae_init"):
            if getattr(self, name) not in ("glorot", "uniform"):
                raise ContractError(f"{name} must be 'glorot' or 'uniform', got {getattr(self, name)!r}")


# ---------------------------------------------------------------- parameters


@dataclass
class ModelParams:
    """Every trainable array, addressable by a stable name."""

    structure: dict
    user_ae: AutoencoderParams
    item_ae: AutoencoderParams
    gru_fwd: GruParams
    gru_bwd: GruParams
    attn: AttentionParams
    ctr: CtrHeadParams
    la: LocalActivationParams
    factor: FactorHeadParams
    bias_user: Tensor
    bias_item: Tensor
    calib: Tensor
    version: int = CHECKPOINT_VERSION
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, structure: dict, rng: np.random.Generator) -> "ModelParams":
        s = structure
        d, sc = s["dim"], s["init_scale"]
        msc = None if s.get("mlp_init", "uniform") == "glorot" else sc
        asc = None if s.get("ae_init", "uniform") == "glorot" else sc
        user_ae = AutoencoderParams.init("user", s["user_dense"], s["n_users"] if s["user_ids"] else 0, rng, d,
                                         s["ae_hidden"], asc)
        item_ae = AutoencoderParams.init("item", s["item_dense"], s["n_items"] if s["item_ids"] else 0, rng, d,
                                         s["ae_hidden"], asc)
        return cls(
            dict(structure), user_ae, item_ae,
            GruParams.init(d, rng, "gru_fwd", sc), GruParams.init(d, rng, "gru_bwd", sc),
            AttentionParams.init(d, rng, "attn", sc),
            CtrHeadParams(d, rng, scale=msc),
            LocalActivationParams(d, rng, scale=msc, normalize=s.get("la_normalize", False)),
            FactorHeadParams(d, rng, scale=msc),
            nx.zeros_param((s["n_users"],), "bias.user"),
            nx.zeros_param((s["n_items"],), "bias.item"),
            Tensor(np.array([1.0, 0.0]), requires_grad=True, name="loss.calib"),
        )

    def named(self) -> list[tuple[str, Tensor]]:
        groups = [self.user_ae.tensors(), self.item_ae.tensors(), self.gru_fwd.tensors(), self.gru_bwd.tensors(),
                  self.attn.tensors(), self.ctr.tensors(), self.la.tensors(), self.factor.tensors(),
                  [self.bias_user, self.bias_item, self.calib]]
        return [(t.name, t) for g in groups for t in g]

    def joint_params(self, variant: VariantId) -> list[Tensor]:
        """Tensors updated by utility training for ``variant`` (decoders excluded)."""
        out = self.user_ae.encoder_tensors() + self.item_ae.encoder_tensors()
        out += self.gru_fwd.tensors() + self.gru_bwd.tensors() + self.attn.tensors() + self.ctr.tensors()
        if variant.uses_factor:
            out += self.la.tensors() + self.factor.tensors()
        if variant.uses_bias:
            out += [self.bias_user, self.bias_item]
        return out + [self.calib]

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.named(), other.named()
        return [n for n, _ in a] == [n for n, _ in b] and all(
            x.shape == y.shape and np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(a, b))


def save_checkpoint(params: ModelParams, path: str | os.PathLike, version: int | None = None) -> None:
    """Versioned little-endian binary: header, JSON metadata, named float64 blocks, CRC32."""
    named = params.named()
    meta = json.dumps({"structure": params.structure, "meta": params.meta}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<III", params.version if version is None else version,
                                params.structure["dim"], len(named)),
             struct.pack("<Q", len(meta)), meta]
    for name, t in named:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 24 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated header)")
    body, crc = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    version, dim, count = struct.unpack_from("<III", blob, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupt or truncated)")
    try:
        off = len(MAGIC) + 12
        (mlen,) = struct.unpack_from("<Q", body, off)
        off += 8
        header = json.loads(body[off:off + mlen].decode())
        off += mlen
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(body):
                raise CheckpointError(f"{path}: block {name!r} runs past end of file")
            arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from None
    structure = header["structure"]
    if structure.get("dim") != dim:
        raise CheckpointError(f"{path}: header dim {dim} disagrees with metadata")
    params = ModelParams.init(structure, np.random.default_rng(0))
    params.meta = header.get("meta", {})
    named = dict(params.named())
    if set(named) != set(arrays):
        raise CheckpointError(f"{path}: parameter names differ from the model layout")
    for name, t in named.items():
        if t.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name]
    return params


# ---------------------------------------------------------------- model


def _left_pad(seqs: Sequence[np.ndarray], fill: int) -> tuple[np.ndarray, np.ndarray]:
    L = max((len(s) for s in seqs), default=0)
    idx = np.full((len(seqs), L), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for b, s in enumerate(seqs):
        if len(s):
            idx[b, L - len(s):] = s
            mask[b, L - len(s):] = 1.0
    return idx, mask


class PursModel:
    """Parameters plus the run state needed to score (catalog, history, clusters)."""

    def __init__(self, catalog: Catalog, params: ModelParams, cfg: TrainConfig, history: History):
        self.catalog = catalog
        self.params = params
        self.cfg = cfg
        self.history = history
        self.clusters: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._prefix_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray] | None] = {}
        self._cluster_table: np.ndarray | None = None
        self.reference_items: np.ndarray | None = None
        self._item_cache: np.ndarray | None = None
        self._user_cache: np.ndarray | None = None

    @property
    def variant(self) -> VariantId:
        return self.cfg.variant

    # ----------------------------------------------------------- embeddings

    def _user_dense(self, idx):
        return self.catalog.user_features[idx] if self.params.user_ae.n_dense else None

    def _item_dense(self, idx):
        return self.catalog.item_features[idx] if self.params.item_ae.n_dense else None

    def encode_users(self, idx: np.ndarray) -> Tensor:
        ae = self.params.user_ae
        return encode_rows(ae, self._user_dense(idx), idx if ae.n_ids else None)

    def encode_items(self, idx: np.ndarray) -> Tensor:
        ae = self.params.item_ae
        return encode_rows(ae, self._item_dense(idx), idx if ae.n_ids else None)

    def item_table(self) -> np.ndarray:
        if self._item_cache is None:
            with nx.no_grad():
                self._item_cache = self.encode_items(np.arange(len(self.catalog.items))).data
        return self._item_cache

    def user_table(self) -> np.ndarray:
        if self._user_cache is None:
            with nx.no_grad():
                self._user_cache = self.encode_users(np.arange(len(self.catalog.users))).data
        return self._user_cache

    def invalidate(self) -> None:
        self._item_cache = None
        self._user_cache = None

    # ----------------------------------------------------------- clusters

    def _clusters_of(self, items: np.ndarray, table: np.ndarray, variant: VariantId | None = None):
        if len(items) == 0:
            return []
        pts = table[items]
        if (variant or self.variant) is VariantId.V5_SINGLE_CLOSURE:
            return single_closure(pts)
        return mean_shift(pts, self.cfg.mean_shift)

    def user_clusters(self, user: int, table: np.ndarray | None = None, variant: VariantId | None = None):
        """Interest clusters of all of ``user``'s consumptions."""
        return self._clusters_of(self.history.items[user], self.item_table() if table is None else table, variant)

    def refresh_clusters(self) -> None:
        """Recompute every user's interest clusters from the current embeddings."""
        self.clusters = {}
        self._prefix_cache = {}
        self._cluster_table = None
        if not self.variant.uses_unexp:
            return
        table = self._cluster_table = self.item_table()
        for u in range(len(self.catalog.users)):
            cl = self.user_clusters(u, table)
            if cl:
                self.clusters[u] = cluster_arrays(cl)

    def prefix_length(self, end: int) -> int:
        """History length whose clusters stand in for an event after ``end`` consumptions.

        Exact below ``cluster_step``, then rounded down to a multiple of it, so
        the clusters never include the event itself or anything later.
        """
        step = self.cfg.cluster_step
        return int(end) if end < step else int(end) - int(end) % step

    def _prefix_clusters(self, user: int, end: int, exact: bool = False):
        p = int(end) if exact else self.prefix_length(end)
        if p == len(self.history.items[user]):
            return self.clusters.get(user)
        key = (user, p)
        if key not in self._prefix_cache:
            table = self.item_table() if self._cluster_table is None else self._cluster_table
            cl = self._clusters_of(self.history.items[user][:p], table)
            self._prefix_cache[key] = cluster_arrays(cl) if cl else None
        return self._prefix_cache[key]

    def _cluster_batch(self, users: np.ndarray, ends: np.ndarray | None = None,
                       exact: bool = False) -> tuple[np.ndarray, np.ndarray]:
        if ends is None:
            found = [self.clusters.get(int(u)) for u in users]
        else:
            found = [self._prefix_clusters(int(u), int(e), exact) for u, e in zip(users, ends)]
        d = self.params.structure["dim"]
        C = max([len(f[1]) for f in found if f is not None], default=1)
        cent = np.zeros((len(users), C, d))
        w = np.zeros((len(users), C))
        for b, f in enumerate(found):
            if f is not None:
                cent[b, :len(f[1])] = f[0]
                w[b, :len(f[1])] = f[1]
        return cent, w

    # ----------------------------------------------------------- forward

    def _combine(self, users, items, E_u, R_u, E_i, win, win_mask, variant: VariantId,
                 ends: np.ndarray | None = None, exact: bool = False) -> dict[str, Tensor]:
        p = self.params
        out = {"r": predict_ctr(E_u, E_i, R_u, p.ctr)}
        unexp = factor = None
        if variant.uses_unexp:
            cent, w = self._cluster_batch(users, ends, exact)
            unexp = batch_unexpectedness(E_i, cent, w)
            out["unexp"] = unexp
        if variant.uses_factor:
            factor = unexp_factor(E_u, win, win_mask, E_i, p.la, p.factor, self.cfg.window_k)
            out["factor"] = factor
        b_u = b_i = 0.0
        if variant.uses_bias:
            b_u = nx.take(p.bias_user, users)
            b_i = nx.take(p.bias_item, items)
        out["utility"] = utility(out["r"], unexp, factor, variant, b_u, b_i)
        return out

    def forward(self, users: np.ndarray, items: np.ndarray, seqs: Sequence[np.ndarray],
                windows: Sequence[np.ndarray], variant: VariantId | None = None,
                ends: np.ndarray | None = None) -> dict[str, Tensor]:
        """Differentiable utility for a batch of (user, item, history) rows.

        ``ends`` gives each row's count of earlier consumptions; when set, the
        interest clusters come from that prefix of the history instead of all of it.
        """
        variant = variant or self.variant
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        pieces = [items] + [np.asarray(s, dtype=np.int64) for s in seqs] + [np.asarray(w, dtype=np.int64) for w in windows]
        uniq = np.unique(np.concatenate(pieces))
        E_all = self.encode_items(uniq)
        seq_idx, seq_mask = _left_pad(seqs, uniq[0])
        win_idx, win_mask = _left_pad(windows, uniq[0])
        B, d = len(users), self.params.structure["dim"]
        E_i = nx.take(E_all, np.searchsorted(uniq, items))
        seq = nx.take(E_all, np.searchsorted(uniq, seq_idx).reshape(-1)).reshape(B, seq_idx.shape[1], d)
        win = nx.take(E_all, np.searchsorted(uniq, win_idx).reshape(-1)).reshape(B, win_idx.shape[1], d)
        uu, inv = np.unique(users, return_inverse=True)
        E_u = nx.take(self.encode_users(uu), inv)
        R_u = encode_sequence(seq, seq_mask, self.params.gru_fwd, self.params.gru_bwd, self.params.attn)
        return self._combine(users, items, E_u, R_u, E_i, win, win_mask, variant, ends)

    def loss_logits(self, util: Tensor) -> Tensor:
        """Logits fed to the click loss: a learned scale and shift of the utility.

        The utility alone is confined to a narrow positive range, which as a raw
        logit cannot express click probabilities below one half.  The affine
        map is strictly increasing, so rankings are those of the utility.
        """
        if not self.cfg.calibrate:
            return util
        c = self.params.calib
        return nx.add(nx.mul(util, nx.getitem(c, 0)), nx.getitem(c, 1))

    def context(self, user: int, at: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        past = self.history.before(user, at)
        return past[-self.cfg.seq_cap:], past[-self.cfg.window_k:]

    def score(self, user: int, items: Sequence[int], at: int | None = None,
              variant: VariantId | None = None, parts: bool = False):
        """Utilities of ``items`` for ``user`` given the history before ``at``."""
        variant = variant or self.variant
        items = np.asarray(items, dtype=np.int64)
        n = len(items)
        seq_items, win_items = self.context(user, at)
        table = self.item_table()
        end = None if at is None else len(self.history.before(user, at))
        d = table.shape[1]
        chunks = []
        with nx.no_grad():
            seq = Tensor(table[seq_items][None])
            R_u = encode_sequence(seq, None, self.params.gru_fwd, self.params.gru_bwd, self.params.attn).data
            for s in range(0, n, SCORE_CHUNK):
                part = items[s:s + SCORE_CHUNK]
                m = len(part)
                E_u = np.broadcast_to(self.user_table()[user], (m, d))
                win = np.broadcast_to(table[win_items][None], (m, len(win_items), d))
                out = self._combine(np.full(m, user), part, Tensor(E_u), Tensor(np.broadcast_to(R_u, (m, R_u.shape[1]))),
                                    Tensor(table[part]), Tensor(win), None, variant,
                                    None if end is None else np.full(m, end), exact=True)
                chunks.append({k: v.data for k, v in out.items()})
        if not chunks:
            return {} if parts else np.zeros(0)
        merged = {k: np.concatenate([c[k] for c in chunks]) for k in chunks[0]}
        return merged if parts else merged["utility"]

    # ----------------------------------------------------------- persistence

    def save(self, path: str | os.PathLike) -> None:
        self.params.meta = {
            "users": self.catalog.users.keys,
            "items": self.catalog.items.keys,
            "user_features": self.catalog.user_features.tolist(),
            "item_features": self.catalog.item_features.tolist(),
            "history_items": [h.tolist() for h in self.history.items],
            "history_times": [t.tolist() for t in self.history.times],
            "config": config_to_dict(self.cfg),
            "reference_items": None if self.reference_items is None else self.reference_items.tolist(),
        }
        save_checkpoint(self.params, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PursModel":
        from .data import Vocab
        params = load_checkpoint(path)
        m = params.meta
        try:
            catalog = Catalog(Vocab.from_keys(m["users"]), Vocab.from_keys(m["items"]),
                              np.array(m["user_features"], dtype=float).reshape(len(m["users"]), -1),
                              np.array(m["item_features"], dtype=float).reshape(len(m["items"]), -1))
            history = History([np.array(h, dtype=np.int64) for h in m["history_items"]],
                              [np.array(t, dtype=np.int64) for t in m["history_times"]])
            cfg = config_from_dict(m["config"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: checkpoint lacks model metadata ({exc})") from None
        model = cls(catalog, params, cfg, history)
        if m.get("reference_items") is not None:
            model.reference_items = np.array(m["reference_items"], dtype=float)
        model.refresh_clusters()
        return model


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["variant"] = cfg.variant.value
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["sgd"] = SgdConfig(**d["sgd"])
    if d.get("pretrain_sgd") is not None:
        d["pretrain_sgd"] = SgdConfig(**d["pretrain_sgd"])
    d["mean_shift"] = MeanShiftConfig(**d["mean_shift"])
    return TrainConfig(**d)


# ---------------------------------------------------------------- training


def build_model(catalog: Catalog, history: History, cfg: TrainConfig, rng: np.random.Generator) -> PursModel:
    structure = {
        "dim": cfg.embedding_dim, "ae_hidden": cfg.ae_hidden, "init_scale": cfg.init_scale,
        "n_users": len(catalog.users), "n_items": len(catalog.items),
        "user_dense": int(catalog.user_features.shape[1]), "item_dense": int(catalog.item_features.shape[1]),
        "user_ids": bool(cfg.use_id_features or catalog.user_features.shape[1] == 0),
        "item_ids": bool(cfg.use_id_features or catalog.item_features.shape[1] == 0),
        "la_normalize": cfg.la_normalize, "mlp_init": cfg.mlp_init,
        "ae_init": cfg.ae_init,
    }
    return PursModel(catalog, ModelParams.init(structure, rng), cfg, history)


def _event_ends(ev: IndexedEvents, history: History) -> np.ndarray:
    """Per event, the count of that user's consumptions strictly earlier."""
    ends = np.empty(len(ev), dtype=np.int64)
    for k, (u, t) in enumerate(zip(ev.user, ev.timestamp)):
        ends[k] = np.searchsorted(history.times[u], t, side="left")
    return ends


def _batch_context(model: PursModel, users, ends):
    cap, K = model.cfg.seq_cap, model.cfg.window_k
    seqs = [model.history.items[u][max(0, e - cap):e] for u, e in zip(users, ends)]
    wins = [model.history.items[u][max(0, e - K):e] for u, e in zip(users, ends)]
    return seqs, wins


def _mean_loss(model: PursModel, ev: IndexedEvents, ends: np.ndarray, idx: np.ndarray) -> float:
    total = 0.0
    bs = max(model.cfg.batch_size, 256)
    with nx.no_grad():
        for s in range(0, len(idx), bs):
            b = idx[s:s + bs]
            seqs, wins = _batch_context(model, ev.user[b], ends[b])
            out = model.forward(ev.user[b], ev.item[b], seqs, wins, ends=ends[b])
            total += nx.bce_with_logits(model.loss_logits(out["utility"]), ev.label[b].astype(float)).item() * len(b)
    return total / max(len(idx), 1)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    auc: float | None
    mean_unexp: float | None
    lr: float | None
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def train(events: Sequence[InteractionEvent], cfg: TrainConfig = TrainConfig(), catalog: Catalog | None = None
          ) -> tuple[PursModel, list[EpochRecord]]:
    """Pretrain the autoencoders, then minimise BCE(sigmoid(utility), click) jointly.

    The latest ``validation_fraction`` of each user's events is held out to
    compute the per-epoch log; epoch 0 describes the model before any joint
    update.  Interest clusters are refreshed every ``cluster_refresh`` epochs
    and held constant in between.
    """
    catalog = catalog or Catalog.build(events)
    indexed = IndexedEvents.from_events(events, catalog)
    if len(indexed) == 0 or len(np.unique(indexed.label)) < 2:
        raise TrainingError("training data must contain both clicked and non-clicked events")
    fit, val = holdout_tail(indexed, cfg.validation_fraction)
    rng = np.random.default_rng(cfg.seed)
    fit_history = History.from_indexed(fit, len(catalog.users))
    model = build_model(catalog, fit_history, cfg, rng)
    p = model.params

    psgd = cfg.pretrain_sgd or cfg.sgd
    for ae, dense in ((p.user_ae, catalog.user_features), (p.item_ae, catalog.item_features)):
        if cfg.pretrain_epochs:
            pretrain(ae, dense if ae.n_dense else None, cfg.pretrain_epochs, psgd, rng, cfg.batch_size)
    model.invalidate()
    model.reference_items = all_embeddings(p.item_ae, catalog.item_features if p.item_ae.n_dense else None)
    reference = ReferenceSpace.build(model, fit_history)

    ends = _event_ends(fit, fit_history)
    active = p.joint_params(cfg.variant)
    records: list[EpochRecord] = []
    want_eval = cfg.log_eval and len(val) > 0
    loss_idx = np.arange(len(fit))
    if len(fit) > cfg.eval_loss_events:
        loss_idx = np.sort(np.random.default_rng(cfg.seed + 7).choice(len(fit), cfg.eval_loss_events, replace=False))

    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        if epoch % cfg.cluster_refresh == 0:
            model.refresh_clusters()
        if epoch == 0 and want_eval:
            records.append(_epoch_record(model, fit, ends, loss_idx, val, reference, 0, None, t0))
        order = rng.permutation(len(fit))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            seqs, wins = _batch_context(model, fit.user[b], ends[b])
            out = model.forward(fit.user[b], fit.item[b], seqs, wins, ends=ends[b])
            loss = nx.bce_with_logits(model.loss_logits(out["utility"]), fit.label[b].astype(float))
            nx.backward(loss)
            nx.sgd_step([t for t in active if t.grad is not None], cfg.sgd, epoch)
            total += loss.item() * len(b)
        model.invalidate()
        train_loss = total / len(fit)
        if want_eval:
            rec = _epoch_record(model, fit, ends, None, val, reference, epoch + 1, train_loss, t0)
            rec.lr = cfg.sgd.lr_at(epoch)
        else:
            rec = EpochRecord(epoch + 1, train_loss, None, None, cfg.sgd.lr_at(epoch), time.perf_counter() - t0)
        records.append(rec)
        log.info("epoch %d loss %.5f auc %s unexp %s", rec.epoch, rec.loss, rec.auc, rec.mean_unexp)

    model.history = History.from_indexed(indexed, len(catalog.users))
    model.refresh_clusters()
    return model, records


def _epoch_record(model, fit, ends, loss_idx, val, reference, epoch, train_loss, t0) -> EpochRecord:
    if train_loss is None:
        train_loss = _mean_loss(model, fit, ends, loss_idx)
    scores = _score_events(model, val)
    a = auc(scores, val.label) if len(np.unique(val.label)) == 2 else float("nan")
    users = np.unique(val.user)
    if len(users) > model.cfg.eval_users:
        users = np.sort(np.random.default_rng(model.cfg.seed + 11).choice(users, model.cfg.eval_users, replace=False))
    recs = {int(u): top_items(model, int(u), 10) for u in users}
    return EpochRecord(epoch, train_loss, a, reference.mean_unexpectedness(recs), None, time.perf_counter() - t0)


def _score_events(model: PursModel, ev: IndexedEvents) -> np.ndarray:
    """Utility of each event given the user's whole current history."""
    scores = np.empty(len(ev))
    for u in np.unique(ev.user):
        pos = np.flatnonzero(ev.user == u)
        scores[pos] = model.score(int(u), ev.item[pos])
    return scores


def score_events(model: PursModel, events: Sequence[InteractionEvent]) -> np.ndarray:
    """Utility of each event from the history strictly before its own timestamp.

    This is the leak-free way to score events that are part of the model's
    history (such as its training data).
    """
    cat = model.catalog
    out = np.empty(len(events))
    for k, e in enumerate(events):
        if e.user_id not in cat.users or e.item_id not in cat.items:
            raise ContractError(f"event ({e.user_id!r}, {e.item_id!r}) is outside the catalog")
        out[k] = model.score(cat.users.index[e.user_id], [cat.items.index[e.item_id]], at=e.timestamp)[0]
    return out


# ---------------------------------------------------------------- ranking and evaluation


def _rank(items: np.ndarray, utilities: np.ndarray, keys: Sequence[str]) -> np.ndarray:
    """Sort by utility descending, ties by item key ascending."""
    key_arr = np.asarray([keys[i] for i in items])
    order = np.lexsort((key_arr, -utilities))
    return items[order]


def recommend_topk(model: PursModel, user: str, candidates: Sequence[str], k: int,
                   variant: VariantId | str | None = None) -> list[str]:
    """The ``k`` candidates with highest utility for ``user``."""
    if not candidates:
        raise ContractError("recommend_topk needs at least one candidate")
    if k > len(candidates):
        raise ContractError(f"k={k} exceeds the {len(candidates)} candidates")
    cat = model.catalog
    if user not in cat.users:
        raise ContractError(f"unknown user {user!r}")
    missing = [c for c in candidates if c not in cat.items]
    if missing:
        raise ContractError(f"unknown items: {missing[:5]}")
    idx = np.array([cat.items.index[c] for c in candidates], dtype=np.int64)
    util = model.score(cat.users.index[user], idx, variant=None if variant is None else parse_variant(variant))
    ranked = _rank(idx, util, cat.items.keys)
    return [cat.items.keys[i] for i in ranked[:k]]


def top_items(model: PursModel, user: int, k: int, exclude: Iterable[int] | None = None) -> list[int]:
    """Top-``k`` catalog indices for ``user`` outside the items in their history."""
    n = len(model.catalog.items)
    blocked = np.zeros(n, dtype=bool)
    blocked[model.history.items[user]] = True
    if exclude is not None:
        blocked[list(exclude)] = True
    cand = np.flatnonzero(~blocked)
    if len(cand) == 0:
        return []
    ranked = _rank(cand, model.score(user, cand), model.catalog.items.keys)
    return [int(i) for i in ranked[:k]]


class ReferenceSpace:
    """Fixed embedding space (post-pretraining item embeddings) for measuring unexpectedness.

    Every variant trained from the same seed shares it, so their
    recommendation lists are compared on one scale.
    """

    def __init__(self, table: np.ndarray, clusters: dict[int, tuple[np.ndarray, np.ndarray]]):
        self.table = table
        self.clusters = clusters

    @classmethod
    def build(cls, model: PursModel, history: History, use_model_space: bool = False) -> "ReferenceSpace":
        table = model.item_table() if use_model_space else model.reference_items
        clusters = {}
        for u, items in enumerate(history.items):
            if len(items):
                clusters[u] = cluster_arrays(mean_shift(table[items], model.cfg.mean_shift))
        return cls(table, clusters)

    def unexp(self, user: int, items: Sequence[int]) -> np.ndarray:
        if user not in self.clusters or len(items) == 0:
            return np.zeros(len(items))
        cent, w = self.clusters[user]
        diff = self.table[np.asarray(items)][:, None, :] - cent[None]
        return np.sqrt((diff ** 2).sum(-1)) @ w

    def mean_unexpectedness(self, recommended: dict[int, list[int]]) -> float:
        vals = [self.unexp(u, items) for u, items in recommended.items() if items]
        return float(np.concatenate(vals).mean()) if vals else 0.0


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    n_negatives: int = 99
    full_catalog: bool = False
    seed: int = 0
    unexp_space: str = "reference"


def evaluate(model: PursModel, test_events: Sequence[InteractionEvent], ecfg: EvalConfig = EvalConfig()
             ) -> MetricsReport:
    """AUC on test events, HR@k on sampled candidates, unexpectedness and coverage of top-k lists."""
    cat = model.catalog
    test = IndexedEvents.from_events(test_events, cat)
    if len(test) == 0:
        raise ContractError("no test events overlap the model's catalog")
    rng = np.random.default_rng(ecfg.seed)
    scores = _score_events(model, test)
    a = auc(scores, test.label)

    n_items = len(cat.items)
    interacted = [set(h.tolist()) for h in model.history.items]
    seen_any = [set() for _ in range(len(cat.users))]
    for u, i in zip(test.user, test.item):
        seen_any[u].add(int(i))
    ranked_lists, targets = [], []
    skipped = 0
    for u in np.unique(test.user):
        u = int(u)
        pos_items = test.item[(test.user == u) & (test.label == 1)]
        if len(pos_items) == 0:
            skipped += 1
            continue
        forbidden = interacted[u] | seen_any[u]
        pool = np.array([i for i in range(n_items) if i not in forbidden], dtype=np.int64)
        cands = []
        for target in pos_items:
            if ecfg.full_catalog:
                cands.append(np.concatenate([[target], pool]))
            else:
                neg = rng.choice(pool, size=min(ecfg.n_negatives, len(pool)), replace=False)
                cands.append(np.concatenate([[target], neg]))
        # one scoring call per user: the history encoding is shared by all targets
        util = model.score(u, np.concatenate(cands))
        start = 0
        for target, cand in zip(pos_items, cands):
            ranked_lists.append(_rank(cand, util[start:start + len(cand)], cat.items.keys))
            targets.append(int(target))
            start += len(cand)
    hr = hr_at_k(ranked_lists, targets, ecfg.k)

    users = [int(u) for u in np.unique(test.user)]
    recs = {u: top_items(model, u, ecfg.k) for u in users}
    if ecfg.unexp_space == "model":
        space = ReferenceSpace.build(model, model.history, use_model_space=True)
    else:
        space = ReferenceSpace.build(model, model.history)
    mu = space.mean_unexpectedness(recs)
    cov = coverage(recs.values(), range(n_items))
    return MetricsReport(a, hr, mu, cov, len(users), len(test), skipped, model.variant.value)


def run_ablation(train_events, test_events, cfg: TrainConfig, ecfg: EvalConfig = EvalConfig(),
                 variants: Sequence[VariantId] = tuple(VariantId), catalog: Catalog | None = None
                 ) -> dict[VariantId, MetricsReport]:
    """Train and evaluate each variant from the same seed."""
    out = {}
    for v in variants:
        model, _ = train(train_events, replace(cfg, variant=v), catalog)
        out[v] = evaluate(model, test_events, ecfg)
    return out

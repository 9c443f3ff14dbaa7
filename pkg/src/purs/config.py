"""Run configuration: TOML file, environment and command-line overrides.

Precedence, highest first: command-line flags, the ``PURS_OUT`` environment
variable (output directory only), the config file, built-in defaults.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import Schema
from .engine import EvalConfig, TrainConfig, parse_variant
from .errors import ConfigError, PursError
from .numerics import SgdConfig
from .unexpectedness import MeanShiftConfig

OUT_ENV = "PURS_OUT"


@dataclass(frozen=True)
class DataSection:
    ratings: str = "data/ml-100k/ratings.csv"
    users: str = ""
    items: str = ""
    user_col: str = "user_id"
    item_col: str = "item_id"
    time_col: str = "timestamp"
    rating_col: str = "rating"
    label_col: str = ""
    threshold: float = 3.5
    delimiter: str = ""
    test_fraction: float = 0.2
    split_by: str = "user"
    n_users: int = 0
    subsample_seed: int = 0

    def schema(self) -> Schema:
        rating = None if self.label_col else (self.rating_col or None)
        return Schema(self.user_col, self.item_col, self.time_col, rating,
                      self.label_col or None, self.threshold, self.delimiter or None)


@dataclass(frozen=True)
class TrainSection:
    variant: str = "FULL"
    epochs: int = 5
    batch_size: int = 32
    embedding_dim: int = 32
    learning_rate: float = 1.0
    decay_factor: float = 0.1
    pretrain_epochs: int = 5
    seq_cap: int = 50
    ae_hidden: int = 64
    init_scale: float = 0.05
    mlp_init: str = "glorot"
    ae_init: str = "uniform"
    use_id_features: bool = True
    validation_fraction: float = 0.1
    eval_users: int = 200
    cluster_refresh: int = 1
    cluster_step: int = 10
    calibrate: bool = True
    la_normalize: bool = False


@dataclass(frozen=True)
class MeanShiftSection:
    bandwidth_c: float = 0.0
    convergence_tol: float = 1e-4
    max_iters: int = 300
    mode_merge_tol: float = 0.0


@dataclass(frozen=True)
class SessionSection:
    window_k: int = 10


@dataclass(frozen=True)
class EvalSection:
    k: int = 10
    n_negatives: int = 99
    full_catalog: bool = False
    unexp_space: str = "reference"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = DataSection()
    train: TrainSection = TrainSection()
    mean_shift: MeanShiftSection = MeanShiftSection()
    session: SessionSection = SessionSection()
    eval: EvalSection = EvalSection()

    def train_config(self) -> TrainConfig:
        t, ms = self.train, self.mean_shift
        return TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, sgd=SgdConfig(t.learning_rate, t.decay_factor),
            embedding_dim=t.embedding_dim, window_k=self.session.window_k, seed=self.seed,
            variant=parse_variant(t.variant), seq_cap=t.seq_cap, pretrain_epochs=t.pretrain_epochs,
            ae_hidden=t.ae_hidden, init_scale=t.init_scale, mlp_init=t.mlp_init, ae_init=t.ae_init,
            use_id_features=t.use_id_features, validation_fraction=t.validation_fraction,
            eval_users=t.eval_users, cluster_refresh=t.cluster_refresh, cluster_step=t.cluster_step,
            calibrate=t.calibrate, la_normalize=t.la_normalize,
            mean_shift=MeanShiftConfig(ms.bandwidth_c or None, ms.convergence_tol, ms.max_iters,
                                       ms.mode_merge_tol or None),
        )

    def eval_config(self) -> EvalConfig:
        e = self.eval
        return EvalConfig(e.k, e.n_negatives, e.full_catalog, self.seed, e.unexp_space)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


SECTIONS = {"data": DataSection, "train": TrainSection, "mean_shift": MeanShiftSection,
            "session": SessionSection, "eval": EvalSection}
TOP_KEYS = {"seed", "out"}


def _coerce(cls, raw: Mapping[str, Any], where: str, bad: list[str]) -> dict:
    types = {f.name: type(f.default) for f in fields(cls)}
    out = {}
    for key, value in raw.items():
        if key not in types:
            bad.append(f"{where}.{key}")
            continue
        want = types[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, want) or (want is int and isinstance(value, bool)):
            bad.append(f"{where}.{key} (expected {want.__name__}, got {type(value).__name__})")
            continue
        out[key] = value
    return out


def from_mapping(raw: Mapping[str, Any]) -> RunConfig:
    """Build a config from parsed TOML; every unknown or mistyped key is reported at once."""
    bad: list[str] = []
    top: dict[str, Any] = {}
    sections: dict[str, Any] = {}
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, Mapping):
                bad.append(f"{key} (expected a table)")
                continue
            sections[key] = SECTIONS[key](**_coerce(SECTIONS[key], value, key, bad))
        elif key in TOP_KEYS:
            top.update(_coerce(RunConfig, {key: value}, "", bad))
        else:
            bad.append(key)
    if bad:
        raise ConfigError("unknown or invalid config keys: " + ", ".join(k.lstrip(".") for k in bad))
    return RunConfig(**top, **sections)


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    """Resolve the full run configuration and validate it before any work starts."""
    raw: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    cfg = from_mapping(raw)
    env = os.environ if env is None else env
    if env.get(OUT_ENV):
        cfg = replace(cfg, out=env[OUT_ENV])
    cfg = apply_overrides(cfg, overrides or {})
    validate(cfg)
    return cfg


def apply_overrides(cfg: RunConfig, ov: Mapping[str, Any]) -> RunConfig:
    """Apply flag values (``None`` means the flag was not given)."""
    if ov.get("seed") is not None:
        cfg = replace(cfg, seed=int(ov["seed"]))
    if ov.get("out") is not None:
        cfg = replace(cfg, out=str(ov["out"]))
    if ov.get("variant") is not None:
        cfg = replace(cfg, train=replace(cfg.train, variant=str(ov["variant"])))
    if ov.get("epochs") is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=int(ov["epochs"])))
    if ov.get("k") is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, k=int(ov["k"])))
    return cfg


def validate(cfg: RunConfig) -> None:
    """Construct every derived config so value errors surface up front."""
    try:
        cfg.train_config()
        cfg.eval_config()
        cfg.data.schema()
    except PursError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.data.split_by not in ("user", "global"):
        raise ConfigError(f"data.split_by must be 'user' or 'global', got {cfg.data.split_by!r}")
    if cfg.eval.unexp_space not in ("reference", "model"):
        raise ConfigError(f"eval.unexp_space must be 'reference' or 'model', got {cfg.eval.unexp_space!r}")
    if cfg.train.mlp_init not in ("glorot", "uniform"):
        raise ConfigError(f"train.mlp_init must be 'glorot' or 'uniform', got {cfg.train.mlp_init!r}")
    if cfg.train.ae_init not in ("glorot", "uniform"):
        raise ConfigError(f"train.ae_init must be 'glorot' or 'uniform', got {cfg.train.ae_init!r}")
    if cfg.eval.k < 1:
        raise ConfigError(f"eval.k must be positive, got {cfg.eval.k}")


def write_resolved(cfg: RunConfig, out_dir: str | os.PathLike) -> Path:
    """Echo the resolved config (defaults filled in) next to the outputs."""
    path = Path(out_dir) / "resolved_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_json() + "\n")
    return path

"""Command-line entry point: ``python -m purs <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, load_config, write_resolved
from .data import Catalog, InteractionEvent, load_features, parse_interactions, split_time_stratified, write_events
from .datasets import subsample_users
from .engine import PursModel, VariantId, evaluate, recommend_topk, train
from .errors import ConfigError, ContractError, PursError, StateError
from .metrics import format_table

COMMANDS = ("ingest", "train", "evaluate", "ablate", "recommend", "clusters")
CHECKPOINT = "model.ckpt"

log = logging.getLogger("purs")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="purs", description="Unexpectedness-aware recommendation pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", help="FULL or V1..V5 (e.g. V4 or V4_NO_UNEXP)")
    p.add_argument("--k", type=int, help="list length for evaluation and recommend")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory (overrides PURS_OUT and the config file)")
    p.add_argument("--user", help="user id for recommend / clusters")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_dataset(cfg: RunConfig) -> tuple[list[InteractionEvent], dict, dict, int]:
    d = cfg.data
    parsed = parse_interactions(d.ratings, d.schema())
    events = parsed.events
    if d.n_users:
        events = subsample_users(events, d.n_users, d.subsample_seed)
    users = load_features(d.users, d.user_col) if d.users else {}
    items = load_features(d.items, d.item_col) if d.items else {}
    return events, users, items, parsed.malformed


def split(cfg: RunConfig, events):
    return split_time_stratified(events, 1, cfg.data.test_fraction, cfg.data.split_by)[0]


def _checkpoint(cfg: RunConfig) -> Path:
    path = Path(cfg.out) / CHECKPOINT
    if not path.exists():
        raise StateError(f"checkpoint not found: {path} (run `train` first)")
    return path


def cmd_ingest(cfg: RunConfig) -> dict:
    events, _, _, malformed = load_dataset(cfg)
    out = Path(cfg.out)
    write_events(events, out / "events.csv")
    stats = {
        "events": len(events),
        "users": len({e.user_id for e in events}),
        "items": len({e.item_id for e in events}),
        "click_rate": float(np.mean([e.label for e in events])) if events else 0.0,
        "malformed": malformed,
        "path": str(out / "events.csv"),
    }
    (out / "ingest_stats.json").write_text(json.dumps(stats, sort_keys=True) + "\n")
    print(json.dumps(stats, sort_keys=True))
    return stats


def _fit(cfg: RunConfig, variant: VariantId | None = None):
    events, uf, itf, _ = load_dataset(cfg)
    tr, te = split(cfg, events)
    catalog = Catalog.build(events, uf, itf)
    tcfg = cfg.train_config()
    if variant is not None:
        tcfg = replace(tcfg, variant=variant)
    model, records = train(tr, tcfg, catalog)
    return model, records, te


def cmd_train(cfg: RunConfig) -> dict:
    model, records, _ = _fit(cfg)
    out = Path(cfg.out)
    model.save(out / CHECKPOINT)
    with open(out / "train_log.jsonl", "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    summary = {"checkpoint": str(out / CHECKPOINT), "epochs": len(records),
               "final": json.loads(records[-1].to_json()) if records else None}
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_evaluate(cfg: RunConfig) -> dict:
    path = _checkpoint(cfg)
    model = PursModel.load(path)
    events, _, _, _ = load_dataset(cfg)
    _, te = split(cfg, events)
    report = evaluate(model, te, cfg.eval_config())
    out = Path(cfg.out)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return report.to_dict()


def cmd_ablate(cfg: RunConfig) -> dict:
    events, uf, itf, _ = load_dataset(cfg)
    tr, te = split(cfg, events)
    catalog = Catalog.build(events, uf, itf)
    reports = []
    for v in VariantId:
        model, _ = train(tr, replace(cfg.train_config(), variant=v), catalog)
        reports.append(evaluate(model, te, cfg.eval_config()))
        log.info("ablation %s done", v.value)
    out = Path(cfg.out)
    table = format_table(reports)
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    print(table)
    return {r.variant: r.to_dict() for r in reports}


def cmd_recommend(cfg: RunConfig, user: str | None) -> dict:
    if user is None:
        raise ConfigError("recommend needs --user")
    model = PursModel.load(_checkpoint(cfg))
    if user not in model.catalog.users:
        raise ContractError(f"unknown user {user!r}")
    seen = {model.catalog.items.keys[i] for i in model.history.items[model.catalog.users.index[user]]}
    cands = [k for k in model.catalog.items.keys if k not in seen]
    k = min(cfg.eval.k, len(cands))
    items = recommend_topk(model, user, cands, k)
    util = model.score(model.catalog.users.index[user], [model.catalog.items.index[i] for i in items])
    result = {"user": user, "k": k, "items": items, "utilities": [float(x) for x in util]}
    print(json.dumps(result))
    return result


def cmd_clusters(cfg: RunConfig, user: str | None) -> list[dict]:
    model = PursModel.load(_checkpoint(cfg))
    cat = model.catalog
    if user is not None and user not in cat.users:
        raise ContractError(f"unknown user {user!r}")
    users = [user] if user is not None else cat.users.keys
    rows = []
    out = Path(cfg.out)
    with open(out / "clusters.jsonl", "w") as fh:
        for key in users:
            u = cat.users.index[key]
            cl = model.user_clusters(u) if len(model.history.items[u]) else []
            row = {"user": key, "n_clusters": len(cl), "sizes": [c.size for c in cl],
                   "centroids": [[round(float(x), 6) for x in c.centroid] for c in cl]}
            line = json.dumps(row)
            fh.write(line + "\n")
            print(line)
            rows.append(row)
    return rows


def run(command: str, config_path: str | None = None, overrides: dict | None = None,
        user: str | None = None) -> int:
    """Execute one command; returns the process exit status."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    cfg = load_config(config_path, overrides)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, cfg.out)
    if command == "ingest":
        cmd_ingest(cfg)
    elif command == "train":
        cmd_train(cfg)
    elif command == "evaluate":
        cmd_evaluate(cfg)
    elif command == "ablate":
        cmd_ablate(cfg)
    elif command == "recommend":
        cmd_recommend(cfg, user)
    else:
        cmd_clusters(cfg, user)
    return 0


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": message})


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(_error_line("usage", str(exc)), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    overrides = {"seed": args.seed, "variant": args.variant, "k": args.k, "epochs": args.epochs, "out": args.out}
    try:
        return run(args.command, args.config, overrides, args.user)
    except ConfigError as exc:
        print(_error_line(exc.kind, str(exc)), file=sys.stderr)
        return 2
    except PursError as exc:
        print(_error_line(exc.kind, str(exc)), file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError) as exc:
        print(_error_line("io", str(exc)), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

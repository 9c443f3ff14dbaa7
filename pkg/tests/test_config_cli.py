import json

import pytest

from purs.cli import COMMANDS, main, run
from purs.config import OUT_ENV, RunConfig, from_mapping, load_config
from purs.data import make_synthetic_world, write_events
from purs.errors import ConfigError
from purs.engine import VariantId


TINY_TRAIN = """
seed = 3

[data]
ratings = "{ratings}"
label_col = "label"

[train]
epochs = 1
embedding_dim = 6
ae_hidden = 8
pretrain_epochs = 1
eval_users = 5

[eval]
n_negatives = 9
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    events, _, _ = make_synthetic_world(12, 30, 20, seed=5)
    write_events(events, root / "events.csv")
    cfg = root / "run.toml"
    cfg.write_text(TINY_TRAIN.format(ratings=root / "events.csv"))
    return root, cfg


def _json_lines(text):
    return [json.loads(line) for line in text.strip().splitlines()]


class TestConfig:
    def test_defaults(self):
        cfg = load_config(env={})
        assert cfg == RunConfig()
        assert cfg.train_config().sgd.learning_rate == 1.0
        assert cfg.train_config().sgd.decay_factor == 0.1

    def test_unknown_keys_are_all_listed(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text('colour = 1\n[train]\nepoch = 3\n[nope]\nx = 1\n')
        with pytest.raises(ConfigError) as exc:
            load_config(p, env={})
        msg = str(exc.value)
        for key in ("colour", "train.epoch", "nope"):
            assert key in msg

    def test_wrong_type_rejected(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            from_mapping({"train": {"epochs": "five"}})

    def test_int_accepted_for_float(self):
        assert from_mapping({"train": {"learning_rate": 2}}).train.learning_rate == 2.0

    def test_precedence_flag_over_env_over_file(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('out = "from_file"\nseed = 1\n[train]\nepochs = 9\n')
        assert load_config(p, env={}).out == "from_file"
        assert load_config(p, env={OUT_ENV: "from_env"}).out == "from_env"
        cfg = load_config(p, {"out": "from_flag", "seed": 7, "epochs": 2}, env={OUT_ENV: "from_env"})
        assert (cfg.out, cfg.seed, cfg.train.epochs) == ("from_flag", 7, 2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.toml", env={})

    def test_invalid_values_caught_up_front(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"variant": "V9"}, env={})
        with pytest.raises(ConfigError):
            load_config(overrides={"k": 0}, env={})

    def test_variant_aliases(self):
        assert load_config(overrides={"variant": "V4"}, env={}).train_config().variant is VariantId.V4_NO_UNEXP

    def test_unknown_command(self):
        with pytest.raises(ConfigError):
            run("serve")


class TestCli:
    def test_evaluate_without_checkpoint(self, tmp_path, capsys):
        code = main(["evaluate", "--out", str(tmp_path / "empty")])
        err = capsys.readouterr().err.strip().splitlines()
        assert code != 0
        assert len(err) == 1
        payload = json.loads(err[0])
        assert payload["error"] == "state"
        assert "checkpoint not found" in payload["message"]

    def test_bad_config_is_one_json_line(self, tmp_path, capsys):
        p = tmp_path / "bad.toml"
        p.write_text("[train]\nbogus = 1\n")
        code = main(["train", "--config", str(p), "--out", str(tmp_path)])
        err = capsys.readouterr().err.strip().splitlines()
        assert code == 2 and len(err) == 1
        assert "train.bogus" in json.loads(err[0])["message"]

    def test_usage_error(self, capsys):
        assert main(["fly"]) == 2
        assert json.loads(capsys.readouterr().err)["error"] == "usage"

    def test_ingest(self, dataset, tmp_path, capsys):
        root, cfg = dataset
        assert main(["ingest", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["events"] == 12 * 20 and stats["malformed"] == 0
        assert (tmp_path / "events.csv").exists()
        assert (tmp_path / "resolved_config.json").exists()

    def test_train_evaluate_deterministic(self, dataset, tmp_path, capsys):
        _, cfg = dataset
        reports = []
        for run_dir in ("a", "b"):
            out = str(tmp_path / run_dir)
            assert main(["train", "--config", str(cfg), "--out", out]) == 0
            assert main(["evaluate", "--config", str(cfg), "--out", out]) == 0
            reports.append(_json_lines(capsys.readouterr().out)[-1])
            assert (tmp_path / run_dir / "model.ckpt").exists()
            assert (tmp_path / run_dir / "train_log.jsonl").exists()
        assert reports[0] == reports[1]
        assert set(reports[0]) >= {"auc", "hr_at_10", "mean_unexpectedness", "coverage"}

    def test_recommend_and_clusters(self, dataset, tmp_path, capsys):
        _, cfg = dataset
        out = str(tmp_path)
        assert main(["train", "--config", str(cfg), "--out", out]) == 0
        capsys.readouterr()
        assert main(["recommend", "--config", str(cfg), "--out", out, "--user", "u0", "--k", "4"]) == 0
        rec = json.loads(capsys.readouterr().out)
        assert rec["k"] == 4 and len(rec["items"]) == 4
        assert rec["utilities"] == sorted(rec["utilities"], reverse=True)
        assert main(["clusters", "--config", str(cfg), "--out", out, "--user", "u0"]) == 0
        rows = _json_lines(capsys.readouterr().out)
        assert len(rows) == 1 and rows[0]["n_clusters"] == len(rows[0]["sizes"])
        assert main(["recommend", "--config", str(cfg), "--out", out, "--user", "nobody"]) == 1

    def test_ablate_has_six_rows(self, dataset, tmp_path, capsys):
        _, cfg = dataset
        assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        table = capsys.readouterr().out.strip().splitlines()
        assert len(table) == 1 + 6
        assert [line.split()[0] for line in table[1:]] == [v.value for v in VariantId]
        assert len(json.loads((tmp_path / "ablation.json").read_text())) == 6

    def test_all_commands_registered(self):
        assert set(COMMANDS) == {"ingest", "train", "evaluate", "ablate", "recommend", "clusters"}

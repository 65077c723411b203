import csv
import json
import os

import numpy as np
import pytest

from label2label import cli, config
from label2label.errors import ConfigError, IncompatibleCheckpoint, SampleNotFound
from label2label.train import (
    evaluate,
    export_attention,
    git_blob_hash,
    load_checkpoint,
    read_pgm,
    save_checkpoint,
    write_pgm,
)

TINY = ["d=8", "heads=2", "ffn_hidden=8", "mlm_layers=1", "batch_size=8", "conv_channels=2,4"]


def tree_bytes(root, skip=("run.json",)):
    out = {}
    for dirpath, _, files in os.walk(root):
        for fn in files:
            if fn in skip:
                continue
            full = os.path.join(dirpath, fn)
            out[os.path.relpath(full, root)] = open(full, "rb").read()
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    out = str(root / "data")
    assert cli.main(["generate", "--m", "4", "--k", "2", "--eps", "0.05", "--rho", "0.3", "--n", "60",
                     "--seed", "7", "--image-size", "8", "--out", out]) == 0
    return os.path.join(out, "manifest.json")


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli_run") / "run")
    assert cli.main(["train", "--dataset", dataset, "--out", out, "--epochs", "2"] + TINY) == 0
    return out


class TestConfig:
    def test_parse_kv(self):
        kv = config.parse_kv("# comment\nlr = 0.1  # trailing\n\nmode=aqn_only\n")
        assert kv == {"lr": "0.1", "mode": "aqn_only"}
        with pytest.raises(ConfigError):
            config.parse_kv("lr 0.1")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            config.from_mapping({"learning_rate": "0.1"})

    def test_aliases_and_types(self):
        cfg = config.from_mapping({"lambda": "0.8", "L": "2", "D": "3", "pos_embedding": "false"})
        assert (cfg.lam, cfg.aqn_layers, cfg.mlm_layers, cfg.pos_embedding) == (0.8, 2, 3, False)
        with pytest.raises(ConfigError):
            config.from_mapping({"epochs": "ten"})

    @pytest.mark.parametrize("bad", [{"alpha": "1.5"}, {"mode": "cnn"}, {"mask_strategy": "rand"},
                                     {"d": "30"}, {"lr": "0"}, {"mode": "two_stage"}, {"aqn_layers": "0"}])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            config.from_mapping(bad).validate()

    def test_env_seed(self, monkeypatch):
        monkeypatch.setenv("L2L_SEED", "123")
        assert config.from_mapping({"seed": "4"}).seed == 123

    def test_file_then_flags(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("lr=0.3\nepochs=5\n")
        mapping = config.load_config_file(str(p))
        mapping.update({"epochs": "7"})
        cfg = config.from_mapping(mapping)
        assert (cfg.lr, cfg.epochs) == (0.3, 7)


class TestGenerate:
    def test_missing_out_is_usage_error(self, capsys):
        assert cli.main(["generate", "--m", "8"]) == 2

    def test_identical_bytes(self, tmp_path):
        args = ["generate", "--m", "4", "--k", "2", "--n", "12", "--seed", "1", "--image-size", "8"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        rec = json.load(open(tmp_path / "a" / "run.json"))
        assert rec["command"] == "generate" and set(rec) == {"command", "args", "config", "input_hash"}

    def test_bad_values(self, tmp_path):
        assert cli.main(["generate", "--m", "2", "--k", "3", "--out", str(tmp_path)]) == 2
        assert cli.main(["generate", "--n", "10", "--splits", "5,5", "--out", str(tmp_path)]) == 2


class TestTrainEval:
    def test_train_outputs(self, trained):
        lines = open(os.path.join(trained, "train_log.jsonl")).read().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert set(rec) == {"epoch", "L_aqn", "L_mlm", "L_total", "lr", "val"}
        assert os.path.exists(os.path.join(trained, "checkpoint", "manifest.txt"))
        run = json.load(open(os.path.join(trained, "run.json")))
        assert run["config"]["epochs"] == 2 and run["config"]["d"] == 8

    def test_config_errors_exit_2(self, dataset, tmp_path):
        assert cli.main(["train", "--dataset", dataset, "--out", str(tmp_path), "bogus=1"]) == 2
        assert cli.main(["train", "--dataset", dataset, "--out", str(tmp_path), "alpha=2"]) == 2
        assert cli.main(["train", "--dataset", str(tmp_path / "none.json"), "--out", str(tmp_path)] + TINY) == 2

    def test_non_finite_exit_3(self, dataset, tmp_path):
        code = cli.main(["train", "--dataset", dataset, "--out", str(tmp_path), "--epochs", "3", "lr=1e150",
                         "momentum=0.9"] + TINY)
        assert code == 3

    def test_one_epoch_bit_exact(self, dataset, tmp_path):
        base = ["train", "--dataset", dataset, "--epochs", "1"] + TINY
        assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(base + ["--out", str(tmp_path / "b")]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_eval_outputs(self, trained, dataset, tmp_path):
        out = tmp_path / "ev"
        assert cli.main(["eval", "--checkpoint", os.path.join(trained, "checkpoint"), "--dataset", dataset,
                         "--out", str(out)]) == 0
        rep = json.load(open(out / "report.json"))
        from label2label.objectives import validate_report_dict

        assert validate_report_dict(rep)
        full = json.load(open(out / "eval.json"))
        assert {"model", "aqn_head", "oracle", "marginal_majority", "occluded_error"} <= set(full)
        rows = list(csv.reader(open(out / "per_attribute_error.csv")))
        assert rows[0] == ["attribute_name", "error"] and len(rows) == 5

    def test_incompatible_checkpoint(self, trained, tmp_path):
        from label2label import data

        path = data.generate(data.SynthSpec(n_attributes=5, n_factors=2, image_size=12), 10, str(tmp_path / "d5"))
        with pytest.raises(IncompatibleCheckpoint):
            evaluate(os.path.join(trained, "checkpoint"), path)
        assert cli.main(["eval", "--checkpoint", os.path.join(trained, "checkpoint"), "--dataset", path,
                         "--out", str(tmp_path / "e")]) == 2

    def test_checkpoint_round_trip(self, trained, tmp_path):
        model, kv = load_checkpoint(os.path.join(trained, "checkpoint"))
        save_checkpoint(model, str(tmp_path / "ck"))
        again, _ = load_checkpoint(str(tmp_path / "ck"))
        for (n1, a), (n2, b) in zip(model.named_parameters(), again.named_parameters()):
            assert n1 == n2 and a.data.tobytes() == b.data.tobytes()
        line = open(tmp_path / "ck" / "manifest.txt").readline().strip()
        assert line.startswith("backbone.conv1_w=backbone.conv1_w.l2lt,3x3x1x2,")

    def test_rerun_reproduces(self, trained, tmp_path):
        assert cli.main(["rerun", os.path.join(trained, "run.json"), "--out", str(tmp_path / "again")]) == 0
        assert tree_bytes(trained) == tree_bytes(tmp_path / "again")


class TestSweepExport:
    def test_sweep(self, dataset, tmp_path):
        out = tmp_path / "sw"
        assert cli.main(["sweep", "--axis", "lambda", "--values", "0.5,1", "--dataset", dataset,
                         "--out", str(out), "--epochs", "1"] + TINY) == 0
        rows = list(csv.reader(open(out / "sweep.csv")))
        assert rows[0] == ["value", "mean_error", "mA", "f1"] and [r[0] for r in rows[1:]] == ["0.5", "1"]

    def test_sweep_bad_axis(self, dataset, tmp_path):
        assert cli.main(["sweep", "--axis", "lr", "--values", "1", "--dataset", dataset,
                         "--out", str(tmp_path)]) == 2
        assert cli.main(["sweep", "--axis", "alpha", "--values", "0.1,7", "--dataset", dataset,
                         "--out", str(tmp_path / "x")]) == 2
        assert not os.path.exists(tmp_path / "x" / "alpha_0.1")

    def test_export(self, trained, dataset, tmp_path):
        out = tmp_path / "att"
        ck = os.path.join(trained, "checkpoint")
        assert cli.main(["export-attention", "--checkpoint", ck, "--dataset", dataset, "--ids", "0,3",
                         "--out", str(out)]) == 0
        doc = json.load(open(out / "sample_3_attention.json"))
        kinds = {e["kind"] for e in doc["attention"]}
        assert kinds == {"aqn_cross", "mlm_self", "mlm_cross"}
        for e in doc["attention"]:
            np.testing.assert_allclose(np.asarray(e["matrix"]).sum(-1), 1.0, atol=1e-9)
        selfm = [e for e in doc["attention"] if e["kind"] == "mlm_self"][0]
        assert np.asarray(selfm["matrix"]).shape == (4, 4) and selfm["row_labels"][0].startswith("attr_0=")
        assert cli.main(["export-attention", "--checkpoint", ck, "--dataset", dataset, "--ids", "0,3",
                         "--out", str(tmp_path / "att2")]) == 0
        assert tree_bytes(out) == tree_bytes(tmp_path / "att2")
        with pytest.raises(SampleNotFound):
            export_attention(ck, dataset, [999], str(tmp_path / "none"))
        assert cli.main(["export-attention", "--checkpoint", ck, "--dataset", dataset, "--ids", "999",
                         "--out", str(tmp_path / "x")]) == 2


def test_pgm_round_trip(tmp_path):
    m = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(tmp_path / "a.pgm", m)
    img = read_pgm(tmp_path / "a.pgm")
    assert img.tolist() == [[0, 128], [255, 64]]
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")


def test_git_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_two_stage_keeps_backbone_and_aqn_frozen(dataset, tmp_path):
    first = str(tmp_path / "aqn")
    assert cli.main(["train", "--dataset", dataset, "--out", first, "--mode", "aqn_only", "--epochs", "1"] + TINY) == 0
    second = str(tmp_path / "two")
    assert cli.main(["train", "--dataset", dataset, "--out", second, "--mode", "two_stage", "--epochs", "2",
                     "init_checkpoint=" + os.path.join(first, "checkpoint")] + TINY) == 0
    a, _ = load_checkpoint(os.path.join(first, "checkpoint"))
    b, _ = load_checkpoint(os.path.join(second, "checkpoint"))
    pa = dict(a.named_parameters())
    for name, t in b.named_parameters():
        if not name.startswith("mlm."):
            assert t.data.tobytes() == pa[name].data.tobytes(), name
    assert cli.main(["eval", "--checkpoint", os.path.join(second, "checkpoint"), "--dataset", dataset,
                     "--out", str(tmp_path / "ev")]) == 0

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from s2m import oracles
from s2m.cli import main
from s2m.datagen import Dataset, read_dataset, write_dataset
from s2m.model import Scorer, load_checkpoint, save_checkpoint

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def gen(out, *extra):
    return main(["gen", "--out", str(out), "--n-train", "600", "--n-test", "200", "--tail-ratio", "5", *extra])


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert gen(out, "--seed", "3") == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestGen:
    def test_example_config_round_trips(self, tmp_path):
        assert main(["gen", "--config", str(CONFIGS / "gen_head_tail.cfg"), "--out", str(tmp_path / "d")]) == 0
        train = read_dataset(tmp_path / "d" / "train.txt")
        write_dataset(train, tmp_path / "again.txt")
        assert read_dataset(tmp_path / "again.txt").equals(train)
        assert (tmp_path / "again.txt").read_bytes() == (tmp_path / "d" / "train.txt").read_bytes()
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["config"]["num_labels"] == 10
        assert manifest["code_version"].startswith("s2m")

    def test_same_seed_byte_identical(self, tmp_path):
        assert gen(tmp_path / "a", "--seed", "7") == 0
        assert gen(tmp_path / "b", "--seed", "7") == 0
        for name in ("train.txt", "test.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_refuses_overwrite(self, tmp_path):
        assert gen(tmp_path) == 0
        assert gen(tmp_path) == 1
        assert gen(tmp_path, "--force") == 0

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("num_labels = 10\nbogus = 1\n")
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_flag_beats_config(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("num_labels = 10\nn_train = 50\nn_test = 20\ntail_ratio = 1\n")
        assert main(["gen", "--config", str(cfg), "--num-labels", "6", "--out", str(tmp_path / "d")]) == 0
        assert read_dataset(tmp_path / "d" / "test.txt").num_labels == 6


class TestTrain:
    def test_missing_required_key(self, dataset_dir, tmp_path, capsys):
        assert main(["train", "s2m", "--data", str(dataset_dir / "train.txt"), "--out", str(tmp_path)]) == 1
        assert "minibatch_size" in capsys.readouterr().err

    def test_method_rule_named(self, dataset_dir, tmp_path, capsys):
        code = main(["train", "sgd", "--data", str(dataset_dir / "train.txt"), "--out", str(tmp_path),
                     "--minibatch-size", "16", "--example-top-k", "4"])
        assert code == 1
        assert "sgd requires" in capsys.readouterr().err

    def test_sgd_equals_s2m(self, dataset_dir, tmp_path):
        common = ["--data", str(dataset_dir / "train.txt"), "--minibatch-size", "32", "--steps", "40",
                  "--seed", "5", "--loss", "softmax_ce", "--label-top-k", "all"]
        assert main(["train", "sgd", "--out", str(tmp_path / "a"), *common]) == 0
        assert main(["train", "s2m", "--out", str(tmp_path / "b"), *common]) == 0
        assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()
        assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["config"]["minibatch_size"] == 32 and manifest["config"]["method"] == "sgd"

    @pytest.mark.parametrize("kp", [1, 16, 32, 64])
    def test_head_tail_preset_sweep(self, dataset_dir, tmp_path, kp):
        code = main(["train", "qsgd" if kp < 64 else "sgd", "--preset", "mnist", "--example-top-k", str(kp),
                     "--steps", "20", "--data", str(dataset_dir / "train.txt"), "--out", str(tmp_path)])
        assert code == 0
        assert len(read_rows(tmp_path / "trace.csv")) == 20

    def test_large_scale_preset_scaled_down(self, tmp_path):
        # smallest label space that admits K_bar = 4096; hidden width reduced to fit memory
        assert main(["gen", "--out", str(tmp_path / "d"), "--num-labels", "4100", "--num-subpops", "1",
                     "--dim", "4", "--n-train", "2100", "--n-test", "10", "--tail-ratio", "1"]) == 0
        code = main(["train", "s2m", "--config", str(CONFIGS / "train_large_scale.cfg"), "--hidden-dim", "4",
                     "--steps", "2", "--data", str(tmp_path / "d" / "train.txt"), "--out", str(tmp_path / "r")])
        assert code == 0
        sc = load_checkpoint(tmp_path / "r" / "checkpoint.bin")
        assert sc.kind == "embedding" and sc.num_labels == 4100

    def test_divergence_is_runtime_failure(self, tmp_path):
        # identical features with different labels: the loss never reaches zero
        ds = Dataset(np.array([[1e150], [1e150]]), [0, 1], 2)
        write_dataset(ds, tmp_path / "d.txt")
        code = main(["train", "s2m", "--data", str(tmp_path / "d.txt"), "--out", str(tmp_path / "r"),
                     "--minibatch-size", "2", "--loss", "bowl", "--base-loss", "squared_hinge",
                     "--learning-rate", "1e200", "--steps", "5"])
        assert code == 2


class TestEval:
    @pytest.fixture
    def wide(self, tmp_path):
        # 60 labels so that r = 50 is valid
        assert main(["gen", "--out", str(tmp_path / "d"), "--num-labels", "60", "--dim", "60",
                     "--n-train", "300", "--n-test", "300", "--tail-ratio", "1",
                     "--head-classes", ",".join(map(str, range(30)))]) == 0
        return tmp_path

    def test_perfect_scorer(self, wide):
        test = read_dataset(wide / "d" / "test.txt")
        # rows of the class means, with an identity feature map, separate noiseless points;
        # use a noiseless copy of the test set so that the fixture is exact
        clean = Dataset(np.eye(60)[test.labels], test.labels, 60)
        write_dataset(clean, wide / "clean.txt")
        save_checkpoint(Scorer("linear", np.eye(60)), wide / "perfect.bin")
        code = main(["eval", "--checkpoint", str(wide / "perfect.bin"), "--data", str(wide / "clean.txt"),
                     "--out", str(wide / "m.csv"), "--r-values", "1,5"])
        assert code == 0
        assert all(float(r["recall"]) == 1.0 for r in read_rows(wide / "m.csv"))

    def test_four_rows_per_tier(self, wide):
        main(["train", "s2m", "--preset", "mnist", "--steps", "5", "--data", str(wide / "d" / "train.txt"),
              "--out", str(wide / "r")])
        code = main(["eval", "--checkpoint", str(wide / "r" / "checkpoint.bin"), "--data", str(wide / "d" / "test.txt"),
                     "--out", str(wide / "m.csv"), "--split", "head_tail", "--head-classes",
                     ",".join(map(str, range(30))), "--manifest", str(wide / "eval.json")])
        assert code == 0
        rows = read_rows(wide / "m.csv")
        for tier in ("full", "head", "tail"):
            assert [int(r["r"]) for r in rows if r["tier"] == tier] == [5, 10, 25, 50]
        assert (wide / "eval.json").exists()

    def test_empty_tier_row_absent(self, wide, capsys):
        save_checkpoint(Scorer.linear(60, 60), wide / "c.bin")
        code = main(["eval", "--checkpoint", str(wide / "c.bin"), "--data", str(wide / "d" / "test.txt"),
                     "--out", str(wide / "m.csv"), "--split", "head_tail", "--r-values", "5",
                     "--head-classes", ",".join(map(str, range(60)))])
        assert code == 0
        assert "no test pairs" in capsys.readouterr().err
        assert {r["tier"] for r in read_rows(wide / "m.csv")} == {"full", "head"}

    def test_frequency_tiers_need_train_data(self, wide):
        save_checkpoint(Scorer.linear(60, 60), wide / "c.bin")
        args = ["eval", "--checkpoint", str(wide / "c.bin"), "--data", str(wide / "d" / "test.txt"),
                "--out", str(wide / "m.csv"), "--split", "frequency_tiers", "--r-values", "5"]
        assert main(args) == 1
        assert main(args + ["--train-data", str(wide / "d" / "train.txt")]) == 0

    def test_dimension_mismatch(self, wide):
        save_checkpoint(Scorer.linear(3, 60), wide / "c.bin")
        assert main(["eval", "--checkpoint", str(wide / "c.bin"), "--data", str(wide / "d" / "test.txt"),
                     "--out", str(wide / "m.csv")]) == 1


class TestOracle:
    def test_cvar_pass(self, tmp_path, capsys):
        assert main(["oracle", "cvar", "--cases", "50", "--out", str(tmp_path / "w.csv")]) == 0
        assert "PASS" in capsys.readouterr().out
        assert (tmp_path / "w.csv").exists()

    def test_gradients_prints_worst_error(self, capsys):
        assert main(["oracle", "gradients", "--cases", "2"]) == 0
        assert "worst softmax_ce/linear" in capsys.readouterr().out

    def test_unknown_suite(self):
        assert main(["oracle", "nonsense"]) == 1

    def test_violation_exit_code(self, monkeypatch):
        def failing(**kw):
            rep = oracles.OracleReport("consistency")
            rep.record("x", 1.0, 0.0)
            return rep

        monkeypatch.setattr(oracles, "verify_consistency", failing)
        assert main(["oracle", "consistency"]) == 3


class TestCvarAndBound:
    def test_estimate(self, tmp_path):
        (tmp_path / "u.txt").write_text("1 5 3 2\n")
        assert main(["cvar", "estimate", "--losses", str(tmp_path / "u.txt"), "--alpha", "0.5",
                     "--out", str(tmp_path / "o.csv")]) == 0
        assert {r["form"]: float(r["value"]) for r in read_rows(tmp_path / "o.csv")} == {
            "closed_form": 4.0, "variational": 4.0, "dual": 4.0}

    def test_decompose(self, tmp_path):
        (tmp_path / "u.txt").write_text("4,1,3,2")
        (tmp_path / "g.txt").write_text("0,0,1,1")
        assert main(["cvar", "decompose", "--losses", str(tmp_path / "u.txt"), "--groups", str(tmp_path / "g.txt"),
                     "--k", "2", "--out", str(tmp_path / "o.csv")]) == 0
        row = read_rows(tmp_path / "o.csv")[0]
        assert float(row["value"]) == 3.5 and float(row["nu_0"]) == 0.5

    def test_bias(self, tmp_path):
        assert main(["cvar", "bias", "--N", "16,64", "--replications", "200", "--alpha", "0.25",
                     "--out", str(tmp_path / "b.csv")]) == 0
        assert [int(r["N"]) for r in read_rows(tmp_path / "b.csv")] == [16, 64]

    def test_missing_losses(self):
        assert main(["cvar", "estimate"]) == 1

    def test_bound(self, capsys):
        assert main(["bound", "--alpha", "0.1", "--rad", "0.05", "--N", "10000", "--delta", "0.05"]) == 0
        line = capsys.readouterr().out.splitlines()[1].split(",")
        assert float(line[-1]) == pytest.approx(0.612238734153404, abs=1e-12)

    def test_bound_domain(self):
        assert main(["bound", "--alpha", "0", "--rad", "0.05", "--N", "10"]) == 1

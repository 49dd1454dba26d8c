import csv
import json

import pytest

from sparse_cf.cli import main


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = main(["synth-gen", "--content", "--clusters", "2", "--items-per-cluster", "15",
                 "--holdout-per-cluster", "10", "--users", "300", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def model_dir(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    code = main(["train", "--transactions", str(corpus_dir / "transactions.tsv"),
                 "--catalog", str(corpus_dir / "catalog.jsonl"), "--schema", str(corpus_dir / "schema.tsv"),
                 "--train-items", str(corpus_dir / "items.tsv"), "--arch", "dcf-mean",
                 "--k-cp", "200", "--epochs", "2", "--d-emb", "4", "--d-hidden", "4", "--d-head", "4",
                 "--batch-size", "8", "--out", str(out)])
    assert code == 0
    return out


def corpus_flags(corpus_dir):
    return ["--catalog", str(corpus_dir / "catalog.jsonl"), "--schema", str(corpus_dir / "schema.tsv")]


class TestSynthGen:
    def test_matrix_summary(self, tmp_path):
        assert main(["synth-gen", "--items", "10", "--users", "50", "--seed", "7", "--out", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "stats.json").read_text())
        assert summary["items"] == 10
        config = json.loads((tmp_path / "config.json").read_text())
        assert config["seed"] == 7 and config["command"] == "synth-gen"

    def test_single_item_warns(self, tmp_path, caplog):
        assert main(["synth-gen", "--items", "1", "--users", "20", "--out", str(tmp_path)]) == 0
        assert "no co-purchases" in caplog.text
        assert json.loads((tmp_path / "stats.json").read_text())["total_pairs"] == 0

    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            main(["synth-gen", "--content", "--clusters", "2", "--items-per-cluster", "5", "--users", "30",
                  "--out", str(tmp_path / name)])
        for f in ("stats.json", "catalog.jsonl", "transactions.tsv", "items.tsv", "config.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() or f == "config.json"

    def test_bad_config(self, tmp_path):
        (tmp_path / "c.json").write_text('{"colour": 1}')
        assert main(["synth-gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2

    def test_config_precedence(self, tmp_path):
        (tmp_path / "c.json").write_text('{"seed": 3, "synth-gen": {"items": 4, "users": 9}}')
        assert main(["synth-gen", "--config", str(tmp_path / "c.json"), "--users", "12", "--out", str(tmp_path)]) == 0
        cfg = json.loads((tmp_path / "config.json").read_text())
        assert (cfg["seed"], cfg["items"], cfg["users"]) == (3, 4, 12)

    def test_workers(self, tmp_path):
        assert main(["synth-gen", "--workers", "4", "--out", str(tmp_path)]) == 2

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth-gen", "--items", "many"])
        assert exc.value.code == 2


class TestValidateObjective:
    def test_untrained_check_fails(self, tmp_path):
        assert main(["validate-objective", "--items", "5", "--users", "50", "--epochs", "0", "--check",
                     "--out", str(tmp_path)]) == 1

    def test_rows_match_epochs(self, tmp_path):
        assert main(["validate-objective", "--items", "8", "--users", "100", "--epochs", "4", "--out", str(tmp_path)]) == 0
        rows = list(csv.reader(open(tmp_path / "convergence.csv")))
        assert len(rows) == 5

    def test_check_passes_small(self, tmp_path):
        assert main(["validate-objective", "--items", "10", "--users", "500", "--epochs", "200", "--check",
                     "--max-rmse", "1e-3", "--min-spearman", "0.999", "--out", str(tmp_path)]) == 0


class TestRatioSweep:
    def test_files(self, tmp_path):
        assert main(["ratio-sweep", "--items", "5", "--users", "100", "--epochs", "2", "--k-cp", "200",
                     "--out", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "sweep_summary.json").read_text())
        assert [r["multiplier"] for r in summary["ratios"]] == [0.1, 0.5, 1.0, 2.0, 10.0]
        assert len(list(tmp_path.glob("ratio_*.csv"))) == 5


class TestTrainEvaluate:
    def test_model_written(self, model_dir):
        assert (model_dir / "model.npz").exists()
        assert (model_dir / "history.csv").read_text().startswith("epoch,")

    def test_train_deterministic(self, corpus_dir, model_dir, tmp_path):
        main(["train", "--transactions", str(corpus_dir / "transactions.tsv"), *corpus_flags(corpus_dir),
              "--train-items", str(corpus_dir / "items.tsv"), "--arch", "dcf-mean", "--k-cp", "200",
              "--epochs", "2", "--d-emb", "4", "--d-hidden", "4", "--d-head", "4", "--batch-size", "8",
              "--out", str(tmp_path)])
        assert (tmp_path / "model.npz").read_bytes() == (model_dir / "model.npz").read_bytes()

    def test_linear_indicator(self, corpus_dir, tmp_path):
        assert main(["train", "--transactions", str(corpus_dir / "transactions.tsv"), "--arch", "linear",
                     "--loss-mode", "mc", "--k-cp", "100", "--k-s", "5", "--epochs", "2", "--out", str(tmp_path)]) == 0

    def test_rnn(self, corpus_dir, tmp_path):
        assert main(["train", "--transactions", str(corpus_dir / "transactions.tsv"), *corpus_flags(corpus_dir),
                     "--arch", "dcf-rnn", "--k-cp", "50", "--epochs", "1", "--d-emb", "3", "--d-hidden", "3",
                     "--d-head", "3", "--d-rnn", "3", "--out", str(tmp_path)]) == 0

    def test_dcf_needs_catalog(self, corpus_dir, tmp_path):
        assert main(["train", "--transactions", str(corpus_dir / "transactions.tsv"), "--arch", "dcf-mean",
                     "--out", str(tmp_path)]) == 2

    def test_missing_transactions_file(self, tmp_path):
        assert main(["train", "--transactions", str(tmp_path / "none.tsv"), "--arch", "linear",
                     "--out", str(tmp_path)]) == 1

    def test_evaluate(self, corpus_dir, model_dir, tmp_path):
        args = ["evaluate", "--model", str(model_dir / "model.npz"), "--transactions",
                str(corpus_dir / "transactions.tsv"), *corpus_flags(corpus_dir), "--k", "1,10",
                "--pool-size", "5", "--n-seeds", "10"]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        report = json.loads((tmp_path / "a" / "report.json").read_text())
        assert set(report["recall"]) == {"1", "10", "30"}
        assert "mrr" in report
        main([*args, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    def test_evaluate_random(self, corpus_dir, tmp_path):
        assert main(["evaluate", "--arch", "random", "--transactions", str(corpus_dir / "transactions.tsv"),
                     "--train-items", str(corpus_dir / "items.tsv"), "--pool-size", "5", "--n-seeds", "10",
                     "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["pool_size"] == 5 and report["n_seeds"] == 10


class TestNeighbors:
    def test_default_positions_clipped(self, corpus_dir, model_dir, tmp_path):
        assert main(["neighbors", "--model", str(model_dir / "model.npz"), *corpus_flags(corpus_dir),
                     "--item", "i00", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "neighbors.tsv").read_text().splitlines()
        # 50 items: positions 0 and 10 survive
        assert [line.split("\t")[0] for line in lines[1:]] == ["0", "10"]
        assert lines[1].split("\t")[1] == "i00"
        assert lines[1].endswith("\t0.000000")

    def test_unknown_item(self, corpus_dir, model_dir, tmp_path):
        assert main(["neighbors", "--model", str(model_dir / "model.npz"), *corpus_flags(corpus_dir),
                     "--item", "nope", "--out", str(tmp_path)]) == 2

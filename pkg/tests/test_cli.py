import re

import pandas as pd
import pytest

from pointgcn.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main
from pointgcn.data import read_packed

TINY_MODEL = ["--knn", "8", "--order", "2", "--filters", "8,8", "--batch", "6"]


@pytest.fixture
def run(tmp_path, monkeypatch):
    """Invoke the CLI from inside tmp_path with quiet output and a private log dir."""
    monkeypatch.chdir(tmp_path)

    def invoke(*argv):
        return main([*argv, "--quiet", "--log-dir", str(tmp_path / "logs")])

    return invoke


@pytest.fixture
def synth_files(run, tmp_path):
    assert run("synth", "--per-class", "3", "--points", "32", "--seed", "1", "--out", "train.pgc") == EXIT_OK
    assert run("synth", "--per-class", "2", "--points", "32", "--seed", "2", "--out", "test.pgc") == EXIT_OK
    return tmp_path / "train.pgc", tmp_path / "test.pgc"


def test_synth_defaults(run, tmp_path):
    assert run("synth", "--per-class", "2", "--points", "64") == EXIT_OK
    dataset = read_packed(tmp_path / "data" / "synth.pgc")
    assert len(dataset) == 8
    assert dataset.point_count == 64
    assert list((tmp_path / "logs").glob("synth_*.log"))


def test_synth_is_byte_reproducible(run, tmp_path):
    for name in ("a.pgc", "b.pgc"):
        assert run("synth", "--per-class", "2", "--points", "32", "--seed", "5", "--out", name) == EXIT_OK
    assert (tmp_path / "a.pgc").read_bytes() == (tmp_path / "b.pgc").read_bytes()


def test_bad_arguments_are_usage_errors(run):
    assert run("synth", "--per-class", "0") == EXIT_USAGE
    assert run("synth", "--classes", "sphere,bogus") == EXIT_USAGE
    assert run("train", "--pooling", "bogus") == EXIT_USAGE
    assert run("train", "--epochs", "three") == EXIT_USAGE
    assert run("fly") == EXIT_USAGE
    assert run("train") == EXIT_USAGE


def test_help_exits_cleanly(capsys):
    assert main(["train", "--help"]) == EXIT_OK
    out = " ".join(capsys.readouterr().out.split())
    assert "--pooling" in out
    assert "(default: 28)" in out


def test_parser_leaves_unset_flags_out():
    args = build_parser().parse_args(["train", "--epochs", "3"])
    assert vars(args)["epochs"] == "3"
    assert "lr" not in vars(args)


def test_preprocess_missing_directory(run, tmp_path):
    assert run("preprocess", "--in", str(tmp_path / "nowhere"), "--out", "packed") == EXIT_RUNTIME


def test_preprocess_points_above_sample(run, tmp_path):
    assert run("preprocess", "--in", str(tmp_path), "--out", "packed", "--points", "64", "--sample", "32") == EXIT_USAGE


def test_preprocess_reports_failures(run, tmp_path):
    good = "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n"
    for split in ("train", "test"):
        (tmp_path / "mesh" / "tet" / split).mkdir(parents=True)
        (tmp_path / "mesh" / "tet" / split / "t.off").write_text(good)
    (tmp_path / "mesh" / "tet" / "train" / "bad.off").write_text("OFF\n1 1 0\n0 0 0\n3 0 0 5\n")

    code = run("preprocess", "--in", "mesh", "--out", "packed", "--points", "32", "--sample", "64")
    assert code == EXIT_RUNTIME
    assert len(read_packed(tmp_path / "packed" / "train.pgc")) == 1
    assert len(read_packed(tmp_path / "packed" / "test.pgc")) == 1


def test_train_eval_active(run, synth_files, tmp_path, capsys):
    train_file, test_file = synth_files
    code = run(
        "train", "--train", str(train_file), "--test", str(test_file), "--epochs", "2",
        "--out-checkpoint", "model.pgck", "--report", "report.csv", *TINY_MODEL,
    )
    assert code == EXIT_OK
    report = pd.read_csv(tmp_path / "report.csv")
    assert report["epoch"].tolist() == [1, 2]
    capsys.readouterr()

    assert run("eval", "--checkpoint", "model.pgck", "--data", str(test_file), "--confusion", "confusion.csv") == EXIT_OK
    out = capsys.readouterr().out
    accuracy = float(re.search(r"Instance accuracy: ([0-9.]+)", out).group(1))
    assert accuracy == pytest.approx(report["inst_acc"].iloc[-1], abs=1e-4)
    confusion = pd.read_csv(tmp_path / "confusion.csv", index_col=0)
    assert confusion.to_numpy().sum() == 8

    assert run("active", "--checkpoint", "model.pgck", "--data", str(test_file), "--index", "3") == EXIT_OK
    assert len(pd.read_csv(tmp_path / "reports" / "active_points.csv")) == 16
    assert run("active", "--checkpoint", "model.pgck", "--data", str(test_file), "--index", "8") == EXIT_USAGE


def test_resume_ignores_model_flags(run, synth_files, tmp_path):
    train_file, test_file = synth_files
    base = ["--train", str(train_file), "--test", str(test_file), *TINY_MODEL]
    assert run("train", *base, "--epochs", "1", "--out-checkpoint", "one.pgck", "--report", "r1.csv") == EXIT_OK
    code = run(
        "train", *base, "--epochs", "2", "--resume", "one.pgck", "--filters", "4,4",
        "--out-checkpoint", "two.pgck", "--report", "r2.csv",
    )
    assert code == EXIT_OK
    assert pd.read_csv(tmp_path / "r2.csv")["epoch"].tolist() == [2]


def test_eval_with_missing_checkpoint(run, synth_files, tmp_path):
    _, test_file = synth_files
    assert run("eval", "--checkpoint", "absent.pgck", "--data", str(test_file)) == EXIT_RUNTIME

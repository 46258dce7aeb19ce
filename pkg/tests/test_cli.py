"""Command-line pipeline: subcommands, artifacts, exit codes, determinism."""

import csv

import pytest

from cacrisk.cli import SCORE_COLUMNS, main

FAST = [
    "--set", "backbone.depth=micro",
    "--set", "backbone.feature_dim=16",
    "--set", "backbone.input_size=32",
    "--set", "train.epochs=2",
    "--set", "train.stage2_epochs=1",
    "--set", "train.batch_size=4",
    "--set", "eval.k=2",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "cohort"
    code = main(["phantom", "--out", str(out), "--seed", "5",
                 "--set", "phantom.n_subjects=10"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, dataset):
    ckpt = tmp_path_factory.mktemp("model") / "risk.ckpt"
    code = main(["train", "--data", str(dataset), "--out", str(ckpt),
                 "--seed", "5", *FAST])
    assert code == 0
    return ckpt


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------- subcommands


def test_phantom_writes_dataset_and_run_artifacts(dataset, capsys):
    assert (dataset / "manifest.csv").exists()
    volumes = sorted(dataset.glob("*.cacv"))
    assert len(volumes) == 10
    for artifact in ("resolved.cfg", "seeds.txt", "files.csv", "run.log"):
        assert (dataset / artifact).exists()
    resolved = (dataset / "resolved.cfg").read_text()
    assert "run.seed = 5" in resolved
    assert "phantom.n_subjects = 10" in resolved
    listed = [row[0] for row in read_rows(dataset / "files.csv")[1:]]
    assert "manifest.csv" in listed
    assert "resolved.cfg" in listed
    assert sum(name.endswith(".cacv") for name in listed) == 10


def test_score_writes_per_subject_csv(dataset, tmp_path, capsys):
    out = tmp_path / "scores.csv"
    assert main(["score", "--data", str(dataset), "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == SCORE_COLUMNS
    assert len(rows) == 11
    assert {r[6] for r in rows[1:]} == {"0", "1"}
    assert "scored 10 subjects" in capsys.readouterr().out


def test_eval_fixed_method(dataset, tmp_path, capsys):
    out = tmp_path / "eval_ag"
    code = main(["eval", "--data", str(dataset), "--out", str(out),
                 "--method", "agatston", "--seed", "5", *FAST])
    assert code == 0
    rows = read_rows(out / "summary.csv")
    assert rows[0][:3] == ["method", "auc_mean", "auc_std"]
    assert len(rows) == 2
    assert rows[1][0] == "agatston"
    assert (out / "roc.csv").exists()
    assert (out / "resolved.cfg").exists()
    assert "AUC" in capsys.readouterr().out


def test_eval_checkpoint(dataset, checkpoint, tmp_path):
    out = tmp_path / "eval_ckpt"
    code = main(["eval", "--data", str(dataset), "--out", str(out),
                 "--checkpoint", str(checkpoint), "--seed", "5", *FAST])
    assert code == 0
    rows = read_rows(out / "summary.csv")
    assert rows[1][0] == f"checkpoint:{checkpoint.name}"


def test_compare_fixed_methods_byte_identical(dataset, tmp_path):
    args = ["compare", "--data", str(dataset), "--seed", "5", *FAST,
            "--set", "eval.methods=agatston,volume,sqrt_volume,grade"]
    out1, out2 = tmp_path / "cmp1", tmp_path / "cmp2"
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    for name in ("summary.csv", "roc.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    rows = read_rows(out1 / "summary.csv")
    assert [r[0] for r in rows[1:]] == ["agatston", "volume", "sqrt_volume",
                                        "grade"]


def test_compare_with_network_method_and_plot(dataset, tmp_path):
    out = tmp_path / "cmp_net"
    code = main(["compare", "--data", str(dataset), "--out", str(out),
                 "--seed", "5", "--plot", *FAST,
                 "--set", "eval.methods=grade,risknet"])
    assert code == 0
    rows = read_rows(out / "summary.csv")
    assert [r[0] for r in rows[1:]] == ["grade", "risknet"]
    svg = (out / "roc.svg").read_bytes()
    assert svg.startswith(b"<?xml") and len(svg) > 1000


def test_gradcheck_passes_and_detects_corruption(capsys):
    fast_net = ["--set", "backbone.depth=micro",
                "--set", "backbone.feature_dim=16",
                "--set", "backbone.input_size=32"]
    assert main(["gradcheck", "--hybrid", "--coords", "60", *fast_net]) == 0
    assert "gradient check passed" in capsys.readouterr().out
    code = main(["gradcheck", "--coords", "40", "--corrupt", "head.weight",
                 *fast_net])
    assert code == 4
    assert "gradient check failed" in capsys.readouterr().err


# -------------------------------------------------------------- exit codes


def test_config_problems_exit_2(tmp_path, capsys):
    assert main(["phantom", "--out", str(tmp_path / "x"),
                 "--set", "bogus.key=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err

    bad = tmp_path / "bad.cfg"
    bad.write_text("train.epochs = fast\n")
    assert main(["phantom", "--out", str(tmp_path / "y"),
                 "--config", str(bad)]) == 2

    # phantom spec constraint violation surfaces as a config problem
    assert main(["phantom", "--out", str(tmp_path / "z"),
                 "--set", "phantom.background_hu_mean=150"]) == 2


def test_missing_dataset_exits_3(tmp_path, capsys):
    assert main(["score", "--data", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "s.csv")]) == 3
    assert "error:" in capsys.readouterr().err


def test_eval_argument_conflicts_exit_2(dataset, checkpoint, tmp_path):
    base = ["eval", "--data", str(dataset), "--out", str(tmp_path / "o")]
    assert main(base) == 2
    assert main(base + ["--method", "agatston",
                        "--checkpoint", str(checkpoint)]) == 2
    assert main(base + ["--method", "risknet"]) == 2
    assert main(base + ["--method", "nonsense"]) == 2


def test_checkpoint_dataset_fingerprint_guard(checkpoint, tmp_path, capsys):
    other = tmp_path / "other_cohort"
    assert main(["phantom", "--out", str(other), "--seed", "99",
                 "--set", "phantom.n_subjects=10"]) == 0
    code = main(["eval", "--data", str(other), "--out", str(tmp_path / "e"),
                 "--checkpoint", str(checkpoint), *FAST])
    assert code == 2
    assert "different dataset" in capsys.readouterr().err


def test_compare_needs_two_methods(dataset, tmp_path):
    assert main(["compare", "--data", str(dataset),
                 "--out", str(tmp_path / "c"),
                 "--set", "eval.methods=grade", *FAST[:-2]]) == 2

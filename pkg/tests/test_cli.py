import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from pedcc_ssl.cli import build_parser, main, parse_grid
from pedcc_ssl.pedcc import load_centroids

SHORT = ["--set", "train.steps=60", "--set", "train.eval_every=30", "--set", "train.seeds=2"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", "blobs", "--out", str(out)] + SHORT) == 0
    return out


# -- generate-centroids -------------------------------------------------------------------------
def test_generate_header_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    code, out, _ = run(capsys, "generate-centroids", "--classes", "10", "--dim", "128", "--seed", "7", "--out", str(a))
    assert code == 0
    assert a.read_text().split("\n")[0] == "PEDCC 1 10 128 7 repulsion"
    assert "min_pairwise_distance" in out and "residual" in out
    assert run(capsys, "generate-centroids", "--classes", "10", "--dim", "128", "--seed", "7",
               "--out", str(b))[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_generate_simplex_method(tmp_path, capsys):
    p = tmp_path / "s.txt"
    assert run(capsys, "generate-centroids", "--classes", "4", "--dim", "3", "--method", "simplex",
               "--out", str(p))[0] == 0
    assert load_centroids(p).method == "simplex"


@pytest.mark.parametrize("argv", [["--classes", "1", "--dim", "4"], ["--classes", "5", "--dim", "3",
                                                                       "--method", "simplex"]])
def test_generate_usage_errors(tmp_path, capsys, argv):
    code, _, err = run(capsys, "generate-centroids", *argv, "--out", str(tmp_path / "x.txt"))
    assert code == 1 and "error" in err


def test_generate_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate-centroids", "--classes", "three", "--dim", "2", "--out", "x"])
    assert exc.value.code == 1


def test_generate_unwritable_path(tmp_path, capsys):
    code, _, err = run(capsys, "generate-centroids", "--classes", "3", "--dim", "2",
                       "--out", str(tmp_path / "missing" / "c.txt"))
    assert code == 1 and "cannot write" in err


def test_generate_non_convergence_writes_flagged_file(tmp_path, capsys):
    p = tmp_path / "u.txt"
    with pytest.warns(UserWarning, match="separation will be poor"):
        code, _, err = run(capsys, "generate-centroids", "--classes", "10", "--dim", "4", "--max-iters", "3",
                           "--out", str(p))
    assert code == 2 and "did not converge" in err
    assert p.read_text().split("\n")[0].endswith("unconverged")


# -- train ---------------------------------------------------------------------------------------
def test_train_writes_outputs(trained):
    for name in ("checkpoint.txt", "centroids.txt", "report.csv", "summary.json", "test_data.csv"):
        assert (trained / name).is_file()
    header, rows = read_csv(trained / "report.csv")
    assert header == ["step", "lr", "l1", "l2", "l3", "l4", "total", "train_acc", "test_acc"]
    assert rows[:, 0].tolist() == [0, 30, 60]


def test_train_echoes_weights_in_summary(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", "blobs", "--out", str(tmp_path), *SHORT,
                       "--set", "loss.lambda3=400", "--set", "loss.lambda4=0.2")
    assert code == 0
    assert "final_test_error" in out
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["config"]["hp"]["lambda3"] == 400
    assert summary["config"]["hp"]["lambda4"] == 0.2
    assert summary["config"]["run"]["loss.lambda3"] == 400
    assert summary["final_test_error"] == pytest.approx(1 - summary["final_test_accuracy"])


def test_train_malformed_config_names_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("train.steps = 5\nthis line is wrong\n")
    code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 1
    assert f"{cfg}:2:" in err


def test_train_runtime_failure_exit_3(tmp_path, capsys):
    # More labeled rows per batch than the dataset holds fails inside training.
    code, _, err = run(capsys, "train", "--config", "blobs", "--out", str(tmp_path), *SHORT,
                       "--set", "train.labeled_batch=64")
    assert code == 3 and "labeled" in err


def test_train_uses_centroid_file(tmp_path, capsys):
    c = tmp_path / "c.txt"
    run(capsys, "generate-centroids", "--classes", "4", "--dim", "8", "--seed", "3", "--out", str(c))
    out = tmp_path / "o"
    assert run(capsys, "train", "--config", "blobs", "--out", str(out), *SHORT,
               "--set", f"centroids.file={c}")[0] == 0
    assert (out / "centroids.txt").read_bytes() == c.read_bytes()


def test_train_rejects_centroid_file_of_wrong_shape(tmp_path, capsys):
    c = tmp_path / "c.txt"
    run(capsys, "generate-centroids", "--classes", "5", "--dim", "8", "--out", str(c))
    code, _, err = run(capsys, "train", "--config", "blobs", "--out", str(tmp_path / "o"), *SHORT,
                       "--set", f"centroids.file={c}")
    assert code == 3 and "5x8" in err


# -- eval -----------------------------------------------------------------------------------------
def test_eval_matches_report_and_repeats(trained, capsys):
    argv = ["eval", "--checkpoint", str(trained / "checkpoint.txt"), "--data", str(trained / "test_data.csv")]
    code, out1, _ = run(capsys, *argv)
    assert code == 0
    _, out2, _ = run(capsys, *argv)
    assert out1 == out2
    summary = json.loads((trained / "summary.json").read_text())
    assert f"accuracy {summary['final_test_accuracy']:.6f}" in out1.splitlines()
    assert sum(ln.startswith("class ") for ln in out1.splitlines()) == 4


def test_eval_dim_mismatch_names_both(trained, tmp_path, capsys):
    bad = tmp_path / "d.csv"
    bad.write_text("label,f0,f1,f2\n0,1,2,3\n")
    code, _, err = run(capsys, "eval", "--checkpoint", str(trained / "checkpoint.txt"), "--data", str(bad))
    assert code == 1
    assert "3 features" in err and "expects 8" in err


def test_eval_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "none"), "--data", str(tmp_path / "d"))
    assert code == 1 and "cannot load checkpoint" in err


# -- export-features -------------------------------------------------------------------------------
def test_export_features(trained, tmp_path, capsys):
    feats = tmp_path / "f.csv"
    code, _, _ = run(capsys, "export-features", "--checkpoint", str(trained / "checkpoint.txt"),
                     "--data", str(trained / "test_data.csv"), "--out", str(feats))
    assert code == 0
    header, rows = read_csv(feats)
    assert header == ["label"] + [f"f{i}" for i in range(8)]
    assert len(rows) == 4 * 250
    np.testing.assert_allclose(np.linalg.norm(rows[:, 1:], axis=1), 1.0, atol=1e-6)
    _, cent = read_csv(tmp_path / "f_centroids.csv")
    np.testing.assert_array_equal(cent[:, 1:], load_centroids(trained / "centroids.txt").points)


def test_export_svg_requires_two_dims(trained, tmp_path, capsys):
    code, _, err = run(capsys, "export-features", "--checkpoint", str(trained / "checkpoint.txt"),
                       "--data", str(trained / "test_data.csv"), "--out", str(tmp_path / "f.csv"),
                       "--svg", str(tmp_path / "f.svg"))
    assert code == 1 and "feature_dim 8" in err
    assert not (tmp_path / "f.svg").exists()


def test_two_dim_features_cluster_at_centroids(tmp_path, capsys):
    # Reference run: within-class spread 0.076 rad against 1.571 rad between adjacent centroids.
    out = tmp_path / "run2d"
    assert run(capsys, "train", "--config", "blobs-2d", "--out", str(out))[0] == 0
    feats, svg = tmp_path / "f.csv", tmp_path / "f.svg"
    assert run(capsys, "export-features", "--checkpoint", str(out / "checkpoint.txt"),
               "--data", str(out / "test_data.csv"), "--out", str(feats), "--svg", str(svg))[0] == 0
    _, rows = read_csv(feats)
    _, cent = read_csv(tmp_path / "f_centroids.csv")
    labels, z, c = rows[:, 0].astype(int), rows[:, 1:], cent[:, 1:]
    within = np.arccos(np.clip(np.sum(z * c[labels], axis=1), -1, 1)).mean()
    a = np.sort(np.arctan2(c[:, 1], c[:, 0]))
    adjacent = np.diff(np.r_[a, a[0] + 2 * np.pi]).mean()
    assert within < adjacent
    assert svg.read_text().startswith("<svg")
    assert svg.read_text().count("<circle") == 1 + len(rows) + 4


# -- ablation -------------------------------------------------------------------------------------
def test_ablation_default_grid_rows_and_repeat(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    argv = ["ablation", "--config", "blobs", *SHORT, "--set", "train.steps=20"]
    assert run(capsys, *argv, "--out", str(a))[0] == 0
    assert run(capsys, *argv, "--out", str(b), "--threads", "3")[0] == 0
    assert a.read_bytes() == b.read_bytes()
    with open(a, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["kind"] for r in rows] == ["ablation"] * 3 + ["sweep"] * 5
    for r in rows:
        assert r["seeds"] == "2"
        assert 0 <= float(r["mean_error"]) <= 1 and float(r["std_error"]) >= 0


def test_ablation_grid_flag(capsys):
    code, out, _ = run(capsys, "ablation", "--config", "blobs", *SHORT, "--set", "train.steps=5",
                       "--seeds", "1", "--grid", "400:0.1,400:0.2,400:0.4")
    assert code == 0
    rows = list(csv.DictReader(out.strip().split("\n")))
    assert [r["name"] for r in rows[3:]] == ["l3=400,l4=0.1", "l3=400,l4=0.2", "l3=400,l4=0.4"]


def test_ablation_bad_grid(capsys):
    code, _, err = run(capsys, "ablation", "--config", "blobs", "--grid", "400-0.1")
    assert code == 1 and "lambda3:lambda4" in err


def test_parse_grid():
    assert parse_grid("400:0.1, 200:0.2,") == [(400.0, 0.1), (200.0, 0.2)]


# -- help and entry point -------------------------------------------------------------------------
@pytest.mark.parametrize("command", ["generate-centroids", "train", "eval", "export-features", "ablation"])
def test_help_lists_flags_with_defaults(command):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    text = sub.format_help()
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text
        if action.default not in (None, "==SUPPRESS==") and action.option_strings and not action.required:
            assert f"(default: {action.default})" in text, action.dest


def test_module_entry_point(tmp_path):
    env = dict(os.environ, PYTHONHASHSEED="0")
    p = subprocess.run([sys.executable, "-m", "pedcc_ssl", "generate-centroids", "--classes", "3", "--dim", "2",
                        "--out", str(tmp_path / "c.txt")], capture_output=True, text=True, env=env)
    assert p.returncode == 0, p.stderr
    assert "min_pairwise_distance" in p.stdout

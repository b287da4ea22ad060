import json
import subprocess
import sys

import numpy as np
import pytest

from embed_eval.cli import main
from embed_eval.dataio import load_features, load_labels, save_features
from embed_eval.training import load_checkpoint


@pytest.fixture
def blobs(tmp_path):
    x, y = tmp_path / "x.emb1", tmp_path / "y.csv"
    assert main(["make-blobs", "--n-classes", "4", "--per-class", "10", "--dims", "6", "--std", "0.1",
                 "--seed", "0", "--out", str(x), "--out-labels", str(y)]) == 0
    return x, y


def run_json(capsys, argv):
    assert main(argv) == 0
    return json.loads(capsys.readouterr().out)


def write_config(tmp_path, obj):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(obj))
    return path


RUN_CONFIG = {
    "version": 1, "seed": 0,
    "data": {"kind": "blobs", "n_classes": 6, "samples_per_class": 8, "dims": 5, "cluster_std": 0.1},
    "evaluation": {"kmeans_runs": 3, "ks": [1, 2]},
    "fractions": [0.5, 1.0],
    "methods": [{"name": "pca", "reduction": "pca", "dims": [2, 3]}],
}


def test_make_blobs(blobs):
    x, y = blobs
    assert load_features(x).shape == (40, 6)
    labels, _ = load_labels(y)
    assert np.bincount(labels).tolist() == [10] * 4


def test_cluster(capsys, blobs):
    x, y = blobs
    out = run_json(capsys, ["cluster", "--in", str(x), "--labels", str(y), "--runs", "4", "--seed", "1"])
    assert out["k"] == 4 and out["run_count"] == 4 and out["nmi_mean"] == 1.0
    out = run_json(capsys, ["cluster", "--in", str(x), "--labels", str(y), "--k", "2", "--runs", "2",
                            "--seed", "1", "--nmi-variant", "geometric", "--lloyd-only"])
    assert out["k"] == 2 and out["nmi_variant"] == "geometric"


def test_retrieve(capsys, blobs, tmp_path):
    x, y = blobs
    out = run_json(capsys, ["retrieve", "--in", str(x), "--labels", str(y), "--ks", "1,4", "--metric", "cosine"])
    assert out["recall_at"] == {"1": 1.0, "4": 1.0}
    w, b = tmp_path / "w.emb1", tmp_path / "b.emb1"
    save_features(np.random.default_rng(0).standard_normal((3, 6)), w)
    save_features(np.zeros((1, 3)), b)
    out = run_json(capsys, ["retrieve", "--in", str(x), "--labels", str(y), "--metric", "invariant",
                            "--w", str(w), "--b", str(b)])
    assert out["metric"] == "invariant-shift" and out["ks"] == [1, 2, 4, 8]


def test_retrieve_invariant_errors(blobs, tmp_path):
    x, y = blobs
    assert main(["retrieve", "--in", str(x), "--labels", str(y), "--metric", "invariant"]) == 2
    w, b = tmp_path / "w.emb1", tmp_path / "b.emb1"
    save_features(np.random.default_rng(0).standard_normal((3, 6)), w)
    save_features(np.zeros((1, 2)), b)
    argv = ["retrieve", "--in", str(x), "--labels", str(y), "--metric", "invariant", "--w", str(w)]
    assert main(argv + ["--b", str(b)]) == 3
    save_features(np.ones((3, 6)), w)
    assert main(argv) == 4  # rank-deficient W


def test_reduce(blobs, tmp_path):
    x, _ = blobs
    out = tmp_path / "r.emb1"
    for kind, dims in (("pca", 3), ("random", 2), ("identity", 6)):
        assert main(["reduce", "--in", str(x), "--kind", kind, "--dims", str(dims), "--seed", "0",
                     "--out", str(out), "--fit", str(x), "--save-projection", str(tmp_path / "p.prj")]) == 0
        assert load_features(out).shape == (40, dims)
    assert main(["reduce", "--in", str(x), "--kind", "identity", "--dims", "3", "--seed", "0",
                 "--out", str(out)]) == 2


def test_subsample(blobs, tmp_path):
    x, y = blobs
    sx, sy = tmp_path / "s.emb1", tmp_path / "s.csv"
    assert main(["subsample", "--in", str(x), "--labels", str(y), "--fraction", "0.05", "--seed", "0",
                 "--out", str(sx), "--out-labels", str(sy)]) == 0
    assert load_features(sx).shape == (4, 6)
    assert sorted(load_labels(sy)[0].tolist()) == [0, 1, 2, 3]


@pytest.mark.parametrize("model", [
    {"kind": "softmax", "variant": "FCR2", "dims": 3},
    {"kind": "contrastive", "dims": 3},
])
def test_train_and_extract(tmp_path, blobs, model):
    x, y = blobs
    cfg = write_config(tmp_path, {"seed": 0, "data": {"features": "x.emb1", "labels": "y.csv"},
                                  "model": model, "train": {"epochs": 2, "batch_size": 8}})
    ckpt = tmp_path / "m.ckpt"
    argv = ["train", "--config", str(cfg), "--out", str(ckpt)]
    if model["kind"] == "softmax":
        argv += ["--export-wb", str(tmp_path / "m")]
    assert main(argv) == 0
    load_checkpoint(ckpt)
    if model["kind"] == "softmax":
        assert load_features(tmp_path / "m.W.emb1").shape == (4, 3)
        assert load_features(tmp_path / "m.b.emb1").shape == (1, 4)
    e = tmp_path / "e.emb1"
    assert main(["extract", "--checkpoint", str(ckpt), "--in", str(x), "--out", str(e)]) == 0
    assert load_features(e).shape == (40, 3)


def test_train_blobs_config(tmp_path):
    cfg = write_config(tmp_path, {"seed": 1, "data": {"kind": "blobs", "n_classes": 3, "samples_per_class": 5,
                                                      "dims": 4}, "train": {"epochs": 1}})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m.ckpt")]) == 0
    assert load_checkpoint(tmp_path / "m.ckpt").variant == "plain"


def test_train_errors(tmp_path):
    cfg = write_config(tmp_path, {"data": {"kind": "blobs"}})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 2
    cfg = write_config(tmp_path, {"seed": 0, "data": {"kind": "blobs", "n_classes": 2, "samples_per_class": 3,
                                                      "dims": 2}, "model": {"kind": "svm"}})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 2


def test_train_diverges(tmp_path):
    cfg = write_config(tmp_path, {"seed": 0, "data": {"kind": "blobs", "n_classes": 2, "samples_per_class": 20,
                                                      "dims": 4, "separation": 1e150},
                                  "train": {"learning_rate": 1e150, "epochs": 3}})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 4


def test_run_and_table(tmp_path, capsys):
    cfg = write_config(tmp_path, RUN_CONFIG)
    report_path = tmp_path / "r.json"
    assert main(["run", "--config", str(cfg), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert len(report["cells"]) == 4
    assert main(["table", "--report", str(report_path), "--axis", "dims"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("method,dims,fraction,nmi_mean,nmi_std,recall@1,recall@2")
    assert [ln.split(",")[1:3] for ln in lines[1:]] == [["2", "0.5"], ["3", "0.5"], ["2", "1.0"], ["3", "1.0"]]


def test_run_exit_codes(tmp_path):
    bad = dict(RUN_CONFIG, version=7)
    assert main(["run", "--config", str(write_config(tmp_path, bad))]) == 2
    files = dict(RUN_CONFIG, data={"kind": "files", "features": "x.emb1", "labels": "y.csv"})
    (tmp_path / "x.emb1").write_bytes(b"EMB0" + bytes(8))
    (tmp_path / "y.csv").write_text("index,label\n")
    assert main(["run", "--config", str(write_config(tmp_path, files))]) == 3
    (tmp_path / "broken.json").write_text("{")
    assert main(["run", "--config", str(tmp_path / "broken.json")]) == 2


def test_missing_file_is_data_error(tmp_path):
    assert main(["cluster", "--in", str(tmp_path / "nope.emb1"), "--labels", str(tmp_path / "nope.csv"),
                 "--seed", "0"]) == 3


def test_table_bad_report(tmp_path):
    (tmp_path / "r.json").write_text("[")
    assert main(["table", "--report", str(tmp_path / "r.json"), "--axis", "dims"]) == 3
    (tmp_path / "r.json").write_text('{"cells": []}')
    assert main(["table", "--report", str(tmp_path / "r.json"), "--axis", "dims"]) == 2


def test_seed_required(blobs):
    x, y = blobs
    with pytest.raises(SystemExit) as info:
        main(["cluster", "--in", str(x), "--labels", str(y)])
    assert info.value.code == 2


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "embed_eval.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "embed-eval" in proc.stdout

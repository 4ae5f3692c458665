import hashlib
import json

import numpy as np
import pytest
import torch

from vqcseq.checkpoint import load_checkpoint, save_checkpoint
from vqcseq.cli import main
from vqcseq.data import read_tensor, write_tensor
from vqcseq.evaluation import read_csv
from vqcseq.model import ModelConfig, VQSeq2Seq


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "m.vqcm"
    save_checkpoint(path, VQSeq2Seq(ModelConfig(base_channels=4, K=16, seed=1)))
    return path


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "x.vqt"
    write_tensor(path, np.random.default_rng(0).random((32, 32)))
    return path


def test_gen_data_twice_is_hash_equal(tmp_path):
    args = ["--seed", "1", "--n-train", "3", "--n-val", "1", "--n-test", "1"]
    assert main(["gen-data", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "b"), *args]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert main(["gen-data", "--out", str(tmp_path / "c"), "--seed", "2", "--n-train", "3", "--n-val", "1", "--n-test", "1"]) == 0
    assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "c")


def test_usage_errors_exit_1(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["gen-data", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1


def test_translate_single_and_multi(ckpt, image, tmp_path):
    model = load_checkpoint(ckpt).model
    X = read_tensor(image)
    assert main(["translate", "--checkpoint", str(ckpt), "--input", str(image), "--output", str(tmp_path / "s.vqt"),
                 "--source", "1", "--target", "4"]) == 0
    with torch.no_grad():
        single = model.translate(X, 0, 3).clamp(0, 1).numpy()
        chained = model.translate_chain(X, [0, 1, 2, 3]).clamp(0, 1).numpy()
    assert np.array_equal(read_tensor(tmp_path / "s.vqt"), single)
    assert main(["translate", "--checkpoint", str(ckpt), "--input", str(image), "--output", str(tmp_path / "m.vqt"),
                 "--source", "1", "--target", "4", "--steps", "multi"]) == 0
    assert np.array_equal(read_tensor(tmp_path / "m.vqt"), chained)
    assert main(["translate", "--checkpoint", str(ckpt), "--input", str(image), "--output", str(tmp_path / "c.vqt"),
                 "--source", "1", "--target", "4", "--steps", "multi", "--chain", "1,2,3,4"]) == 0
    assert np.array_equal(read_tensor(tmp_path / "c.vqt"), chained)


def test_translate_argument_errors(ckpt, image, tmp_path, capsys):
    base = ["translate", "--checkpoint", str(ckpt), "--input", str(image), "--output", str(tmp_path / "o.vqt")]
    assert main(base + ["--source", "0", "--target", "4"]) == 1
    assert "--source" in capsys.readouterr().err
    assert main(base + ["--source", "1", "--target", "4", "--steps", "multi", "--chain", "2,3,4"]) == 1
    assert main(base + ["--source", "1", "--target", "4", "--chain", "1,4"]) == 1


def test_data_errors_exit_2(ckpt, image, tmp_path, capsys):
    bad = tmp_path / "bad.vqt"
    bad.write_bytes(b"garbage!")
    assert main(["translate", "--checkpoint", str(ckpt), "--input", str(bad), "--output", str(tmp_path / "o.vqt"),
                 "--source", "1", "--target", "2"]) == 2
    assert "bad.vqt" in capsys.readouterr().err
    assert main(["translate", "--checkpoint", str(tmp_path / "none.vqcm"), "--input", str(image), "--output", str(tmp_path / "o.vqt"),
                 "--source", "1", "--target", "2"]) == 2
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "e")]) == 2


def test_dump_config_roundtrip(tmp_path, capsys):
    assert main(["train", "--dump-config", "--set", "model.K=32", "--steps", "7", "--seed", "3"]) == 0
    text = capsys.readouterr().out
    doc = json.loads(text)
    assert doc["model"]["K"] == 32 and doc["total_steps"] == 7 and doc["seed"] == 3
    (tmp_path / "c.json").write_text(text)
    assert main(["train", "--dump-config", "--config", str(tmp_path / "c.json")]) == 0
    assert capsys.readouterr().out == text


def test_unknown_override_exit_1(capsys):
    assert main(["train", "--dump-config", "--set", "model.colour=1"]) == 1
    assert "model.colour" in capsys.readouterr().err


def test_train_requires_data(capsys):
    assert main(["train", "--steps", "1"]) == 1
    assert "--data" in capsys.readouterr().err


def test_augment_transforms(image, tmp_path, ckpt):
    X = read_tensor(image)
    out = tmp_path / "a.vqt"
    assert main(["augment", "--input", str(image), "--output", str(out), "--transform", "gamma", "--gamma", "1"]) == 0
    assert np.array_equal(read_tensor(out), X)
    assert main(["augment", "--input", str(image), "--output", str(out), "--transform", "gamma", "--gamma", "2"]) == 0
    np.testing.assert_allclose(read_tensor(out), X**2, rtol=1e-6)
    for t in ("noise", "bias", "intensity"):
        assert main(["augment", "--input", str(image), "--output", str(out), "--transform", t, "--sigma", "0.1", "--alpha", "1"]) == 0
        Y = read_tensor(out)
        assert Y.shape == X.shape and Y.min() >= 0 and Y.max() <= 1
    assert main(["augment", "--input", str(image), "--output", str(out), "--transform", "random"]) == 1
    assert main(["augment", "--input", str(image), "--output", str(out), "--transform", "random", "--checkpoint", str(ckpt), "--seed", "4"]) == 0
    first = read_tensor(out)
    main(["augment", "--input", str(image), "--output", str(out), "--transform", "random", "--checkpoint", str(ckpt), "--seed", "4"])
    assert np.array_equal(read_tensor(out), first)
    assert main(["augment", "--input", str(image), "--output", str(out), "--transform", "gamma", "--gamma", "-1"]) == 1


def test_train_eval_probe_pipeline(small_dataset, tmp_path, capsys):
    run = tmp_path / "run"
    args = ["train", "--data", str(small_dataset), "--out", str(run), "--steps", "4", "--seed", "2",
            "--set", "model.base_channels=4", "--set", "model.K=16", "--set", "log_every=2", "--set", "checkpoint_every=2"]
    assert main(args) == 0
    assert (run / "final.vqcm").exists() and (run / "loss.csv").exists() and (run / "val.csv").exists()
    ck = str(run / "final.vqcm")
    assert main(["eval", "--checkpoint", ck, "--data", str(small_dataset), "--out", str(tmp_path / "ev")]) == 0
    rows = read_csv(tmp_path / "ev" / "translation.csv")
    assert {r["mode"] for r in rows} == {"single", "multi"}
    assert main(["eval", "--checkpoint", ck, "--data", str(small_dataset), "--out", str(tmp_path / "ev"), "--task", "noise"]) == 0
    assert (tmp_path / "ev" / "noise_summary.csv").exists()
    assert main(["probe", "--checkpoint", ck, "--data", str(small_dataset), "--out", str(tmp_path / "pr")]) == 0
    probe_rows = read_csv(tmp_path / "pr" / "probe.csv")
    assert {r["probe"] for r in probe_rows} == {"fitted", "permuted"}
    assert "lesion dice" in capsys.readouterr().out


def test_sweep_grid(small_dataset, tmp_path):
    args = ["sweep", "--data", str(small_dataset), "--out", str(tmp_path / "sw"), "--D", "1,2", "--K", "8,16", "--steps", "1",
            "--set", "model.base_channels=4", "--set", "log_every=1", "--set", "checkpoint_every=1"]
    assert main(args) == 0
    rows = read_csv(tmp_path / "sw" / "sweep.csv")
    assert sorted((int(r["D"]), int(r["K"])) for r in rows) == [(1, 8), (1, 16), (2, 8), (2, 16)]


def test_numeric_failure_exit_3(small_dataset, tmp_path, monkeypatch, capsys):
    from vqcseq import cli
    from vqcseq.exceptions import NumericError

    def explode(*a, **kw):
        raise NumericError("step 1: invalid loss components {'l1': nan}", {"l1": float("nan")})

    monkeypatch.setattr(cli, "train", explode)
    assert main(["train", "--data", str(small_dataset), "--out", str(tmp_path / "r")]) == 3
    assert "l1" in capsys.readouterr().err

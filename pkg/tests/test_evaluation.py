import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from vqcseq.data import PhantomDataset
from vqcseq.evaluation import (
    CodeProbe,
    MetricReport,
    default_chain,
    dice,
    downsample_labels,
    eval_anti_interference,
    eval_probe,
    eval_translation,
    fit_code_probe,
    improvement,
    predict_labels,
    psnr,
    read_csv,
    ssim_metric,
)


def test_psnr_closed_form():
    x = np.zeros((32, 32))
    assert abs(psnr(x, x + 0.1) - 20.0) <= 1e-9
    assert psnr(x, x) == math.inf
    assert psnr(x, x + 0.2, data_range=2.0) == pytest.approx(20.0, abs=1e-9)


def test_ssim_identity_and_reference(rng):
    x = rng.random((32, 32))
    assert abs(ssim_metric(x, x) - 1.0) <= 1e-6
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    assert ssim_metric(x, y) == pytest.approx(ref, abs=1e-6)


def test_dice_identities(rng):
    m = rng.random((16, 16)) > 0.5
    assert dice(m, m) == 1.0
    assert dice(m, ~m) == 0.0
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    a = np.zeros(10, bool)
    b = np.zeros(10, bool)
    a[:4] = True
    b[2:6] = True
    assert dice(a, b) == pytest.approx(0.5)
    assert dice(a, b) == dice(b, a)


def test_report_aggregate_and_csv(tmp_path):
    r = MetricReport(rows=[
        {"subject": "a", "task": "1->4", "mode": "single", "psnr": 20.0, "ssim": 0.5},
        {"subject": "b", "task": "1->4", "mode": "single", "psnr": 22.0, "ssim": 0.7},
        {"subject": "a", "task": "1->4", "mode": "multi", "psnr": 19.0, "ssim": 0.4},
    ])
    (agg_multi, agg_single) = r.aggregate()
    assert agg_single["psnr_mean"] == 21.0 and agg_single["psnr_std"] == 1.0 and agg_single["n"] == 2
    assert agg_multi["n"] == 1
    assert r.delta("1->4", "psnr") == 2.0
    r.write_csv(tmp_path / "rows.csv", tmp_path / "agg.csv")
    rows = read_csv(tmp_path / "rows.csv")
    assert len(rows) == 3 and float(rows[1]["psnr"]) == 22.0
    assert len(read_csv(tmp_path / "agg.csv")) == 2


def test_default_chain():
    assert default_chain(0, 3) == [0, 1, 2, 3]
    assert default_chain(3, 1) == [3, 2, 1]
    assert default_chain(2, 2) == [2]


def test_eval_translation(small_model, small_dataset):
    test = PhantomDataset(small_dataset).split("test")
    r = eval_translation(small_model, test, 0, 3, mode="both")
    assert len(r.rows) == 2 * len(test)
    assert r.notes["chain"] == "1->2->3->4"
    assert {row["mode"] for row in r.rows} == {"single", "multi"}
    assert all(np.isfinite(row["psnr"]) for row in r.rows)
    with pytest.raises(ValueError):
        eval_translation(small_model, test, 0, 3, chain=[0, 2])
    with pytest.raises(ValueError):
        eval_translation(small_model, test, 0, 3, mode="pair")


def test_eval_translation_needs_pairs(small_model, small_dataset):
    train = PhantomDataset(small_dataset).split("train")
    no_pairs = [s for s in train if not (s.flags[0] and s.flags[3])]
    with pytest.raises(ValueError):
        eval_translation(small_model, no_pairs, 0, 3)


def test_anti_interference_report(small_model, small_dataset):
    test = PhantomDataset(small_dataset).split("test")
    a = eval_anti_interference(small_model, test, "noise", sigma=0.1, seed=0)
    b = eval_anti_interference(small_model, test, "noise", sigma=0.1, seed=0)
    assert len(a.rows) == 4 * len(test)
    assert a.rows == b.rows
    assert improvement(a) == pytest.approx(a.mean("psnr") - a.mean("baseline_psnr"))
    bias = eval_anti_interference(small_model, test, "bias", alpha=2.0)
    assert bias.notes["corruption"] == "bias"
    with pytest.raises(ValueError):
        eval_anti_interference(small_model, test, "blur")


def test_downsample_labels_majority():
    t = np.array([[1, 1, 2, 2], [1, 0, 2, 3], [0, 0, 3, 3], [0, 3, 3, 3]])
    assert downsample_labels(t, 2).tolist() == [[1, 2], [0, 3]]
    tie = np.array([[2, 1], [1, 2]])
    assert downsample_labels(tie, 2).tolist() == [[1]]


def test_probe_roundtrip(small_model, small_dataset):
    ds = PhantomDataset(small_dataset)
    subject = ds.split("val")[0]
    probe = fit_code_probe(small_model, subject)
    assert probe.code_to_label.shape == (small_model.cfg.K,)
    pred = predict_labels(probe, small_model, subject)
    assert pred.shape == subject.tissue_map.shape
    rows = eval_probe(probe, small_model, ds.split("test"))
    assert len(rows) == 3
    assert all(0.0 <= v <= 1.0 for r in rows for k, v in r.items() if k.startswith("dice_"))
    perm = probe.permuted(0)
    assert sorted(perm.code_to_label.tolist()) == sorted(probe.code_to_label.tolist())


def test_probe_predict_unassigned():
    p = CodeProbe(np.array([2, -1, 0]), "s", 3)
    assert p.predict(np.array([[0, 1], [2, 0]])).tolist() == [[2, -1], [0, 2]]

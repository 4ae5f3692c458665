"""Image quality metrics, translation / anti-interference reports and the
latent code segmentation probe."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import torch

from .augmentation import add_noise, bias_field
from .losses import ssim_loss
from .validation import as_tensor, check_random_state, check_same_shape, to_numpy

PSNR_INF = math.inf
METRICS = ("psnr", "ssim")


def psnr(x, y, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are equal."""
    x = np.asarray(to_numpy(x), dtype=np.float64)
    y = np.asarray(to_numpy(y), dtype=np.float64)
    check_same_shape(x, y, ("x", "y"))
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(data_range**2 / mse))


def ssim_metric(x, y) -> float:
    """SSIM with the loss's window and constants; equals ``1 - ssim_loss``."""
    x = as_tensor(np.asarray(to_numpy(x), dtype=np.float64))
    y = as_tensor(np.asarray(to_numpy(y), dtype=np.float64))
    return float(1.0 - ssim_loss(x, y))


def dice(pred, truth) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1.0."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(truth, dtype=bool)
    check_same_shape(p, g, ("pred", "truth"))
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


@dataclass
class MetricReport:
    """Per-subject rows plus aggregates per (task, mode).

    Each row is a dict with at least ``subject``, ``task``, ``mode`` and the
    metric columns.  Standard deviations are population (ddof=0).
    Metrics are computed on whole images after clamping outputs to [0, 1].
    """

    rows: List[dict] = field(default_factory=list)
    metrics: Sequence[str] = METRICS
    notes: Dict[str, str] = field(default_factory=dict)

    def aggregate(self) -> List[dict]:
        groups = defaultdict(list)
        for r in self.rows:
            groups[(r["task"], r["mode"])].append(r)
        out = []
        for (task, mode), rows in sorted(groups.items()):
            agg = {"task": task, "mode": mode, "n": len(rows)}
            for m in self.metrics:
                vals = np.array([r[m] for r in rows], dtype=np.float64)
                agg[f"{m}_mean"] = float(vals.mean())
                agg[f"{m}_std"] = float(vals.std())
            out.append(agg)
        return out

    def mean(self, metric, task=None, mode=None) -> float:
        vals = [r[metric] for r in self.rows if (task is None or r["task"] == task) and (mode is None or r["mode"] == mode)]
        return float(np.mean(vals))

    def delta(self, task, metric, a="single", b="multi") -> float:
        """Mean of mode ``a`` minus mean of mode ``b``."""
        return self.mean(metric, task, a) - self.mean(metric, task, b)

    def extend(self, other: "MetricReport") -> "MetricReport":
        self.rows.extend(other.rows)
        self.notes.update(other.notes)
        return self

    def write_csv(self, path, aggregate_path=None) -> None:
        _write_rows(path, self.rows)
        if aggregate_path is not None:
            _write_rows(aggregate_path, self.aggregate())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_rows(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in keys})


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run(model, fn):
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            return fn()
    finally:
        model.train(was)


def _clamp(t) -> np.ndarray:
    return to_numpy(t.clamp(0, 1)).astype(np.float64)


def default_chain(source: int, target: int) -> List[int]:
    step = 1 if target >= source else -1
    return list(range(source, target + step, step))


def task_name(source, target) -> str:
    return f"{source + 1}->{target + 1}"


def eval_translation(model, subjects, source: int, target: int, mode: str = "single", chain=None) -> MetricReport:
    """PSNR/SSIM of source->target translation against ground truth.

    ``mode`` is ``"single"``, ``"multi"`` or ``"both"``; multi applies
    ``chain`` (default: every intermediate sequence in order).  With
    ``"both"`` the report supports :meth:`MetricReport.delta`.
    """
    if mode not in ("single", "multi", "both"):
        raise ValueError(f"mode must be single, multi or both, got {mode!r}")
    chain = list(chain) if chain is not None else default_chain(source, target)
    if chain[0] != source or chain[-1] != target:
        raise ValueError(f"chain {chain} must start at source {source} and end at target {target}")
    subjects = [s for s in subjects if s.flags[source] and s.flags[target]]
    if not subjects:
        raise ValueError("no subject has both the source and target sequence")
    X = np.stack([np.asarray(s.images[source], dtype=np.float32) for s in subjects])
    Y = np.stack([np.asarray(s.images[target], dtype=np.float64) for s in subjects])
    outputs = {}
    if mode in ("single", "both"):
        outputs["single"] = _clamp(_run(model, lambda: model.translate(X, source, target)))
    if mode in ("multi", "both"):
        outputs["multi"] = _clamp(_run(model, lambda: model.translate_chain(X, chain)))
    report = MetricReport(notes={"region": "whole image", "chain": "->".join(str(c + 1) for c in chain)})
    task = task_name(source, target)
    for m, out in outputs.items():
        for s, pred, gt in zip(subjects, out, Y):
            report.rows.append({"subject": s.subject_id, "task": task, "mode": m, "psnr": psnr(pred, gt), "ssim": ssim_metric(pred, gt)})
    return report


def corrupt(X, corruption: str, rng, sigma=0.1, alpha=2.0, scale=0.2) -> np.ndarray:
    if corruption == "noise":
        return add_noise(X, sigma, rng)
    if corruption == "bias":
        return bias_field(X, alpha, scale, rng)
    raise ValueError(f"unknown corruption {corruption!r}")


def eval_anti_interference(model, subjects, corruption: str = "noise", sigma: float = 0.1, alpha: float = 2.0, scale: float = 0.2, seed: int = 0) -> MetricReport:
    """Self-reconstruct corrupted inputs and compare against the clean image.

    Rows carry the reconstruction metrics plus ``baseline_psnr`` /
    ``baseline_ssim`` of the corrupted input itself.
    """
    rng = check_random_state(seed)
    report = MetricReport(metrics=("psnr", "ssim", "baseline_psnr", "baseline_ssim"), notes={"corruption": corruption})
    for s in subjects:
        for i in s.available:
            clean = np.asarray(s.images[i], dtype=np.float32)
            bad = corrupt(clean, corruption, rng, sigma, alpha, scale)
            rec = _clamp(_run(model, lambda: model.translate(bad, i, i)))
            ref = clean.astype(np.float64)
            report.rows.append({
                "subject": s.subject_id,
                "task": f"{corruption}:{i + 1}",
                "mode": "self",
                "psnr": psnr(rec, ref),
                "ssim": ssim_metric(rec, ref),
                "baseline_psnr": psnr(bad.astype(np.float64), ref),
                "baseline_ssim": ssim_metric(bad.astype(np.float64), ref),
            })
    return report


def improvement(report: MetricReport, metric="psnr") -> float:
    """Mean reconstruction metric minus mean corrupted-input baseline."""
    return report.mean(metric) - report.mean(f"baseline_{metric}")


# -- code probe -------------------------------------------------------------

@dataclass
class CodeProbe:
    code_to_label: np.ndarray  # (K,), -1 = unassigned
    trained_on: str = ""
    n_labels: int = 0

    def predict(self, indices) -> np.ndarray:
        lab = self.code_to_label[np.asarray(indices)]
        return lab

    def permuted(self, seed=0) -> "CodeProbe":
        rng = check_random_state(seed)
        return CodeProbe(rng.permutation(self.code_to_label), f"{self.trained_on}:permuted", self.n_labels)


def downsample_labels(tissue_map, factor: int) -> np.ndarray:
    """Majority label per factor x factor block; ties go to the lowest label."""
    t = np.asarray(tissue_map, dtype=np.int64)
    H, W = t.shape
    blocks = t.reshape(H // factor, factor, W // factor, factor).transpose(0, 2, 1, 3).reshape(H // factor, W // factor, -1)
    n = int(t.max()) + 1
    counts = np.zeros(blocks.shape[:2] + (n,), dtype=np.int64)
    for lab in range(n):
        counts[..., lab] = (blocks == lab).sum(-1)
    return counts.argmax(-1)


def _code_indices(model, subject) -> Dict[int, np.ndarray]:
    X = subject.stacked()
    idx = _run(model, lambda: model.quantize(model.encode(X)).indices)
    return dict(zip(subject.available, to_numpy(idx)))


def code_label_counts(model, subject) -> np.ndarray:
    """(K, n_labels) co-occurrence counts of code index and block label."""
    if subject.tissue_map is None:
        raise ValueError(f"subject {subject.subject_id!r} has no tissue map")
    f = 2**model.cfg.downsample_stages
    labels = downsample_labels(subject.tissue_map, f)
    n_labels = int(np.asarray(subject.tissue_map).max()) + 1
    counts = np.zeros((model.cfg.K, n_labels), dtype=np.int64)
    for idx in _code_indices(model, subject).values():
        np.add.at(counts, (idx.reshape(-1), labels.reshape(-1)), 1)
    return counts


def fit_code_probe(model, subject, n_labels: int | None = None) -> CodeProbe:
    """Assign every code its majority label over one labelled subject."""
    counts = code_label_counts(model, subject)
    if n_labels is not None and n_labels > counts.shape[1]:
        counts = np.pad(counts, ((0, 0), (0, n_labels - counts.shape[1])))
    seen = counts.sum(1) > 0
    code_to_label = np.where(seen, counts.argmax(1), -1)
    return CodeProbe(code_to_label, subject.subject_id, counts.shape[1])


def predict_labels(probe: CodeProbe, model, subject) -> np.ndarray:
    """Image-resolution label map: per-position vote across sequences.

    Unassigned codes do not vote; positions without any vote are
    background.  Ties go to the lowest label.
    """
    f = 2**model.cfg.downsample_stages
    per_seq = [probe.predict(idx) for idx in _code_indices(model, subject).values()]
    votes = np.stack(per_seq)
    n = max(probe.n_labels, int(votes.max()) + 1, 1)
    counts = np.zeros(votes.shape[1:] + (n,), dtype=np.int64)
    for lab in range(n):
        counts[..., lab] = (votes == lab).sum(0)
    pred = np.where(counts.sum(-1) > 0, counts.argmax(-1), 0)
    return np.kron(pred, np.ones((f, f), dtype=np.int64))


def eval_probe(probe: CodeProbe, model, subjects, labels=None) -> List[dict]:
    """Dice per class per subject; both-empty classes score 1.0."""
    rows = []
    for s in subjects:
        pred = predict_labels(probe, model, s)
        truth = np.asarray(s.tissue_map)
        labs = labels if labels is not None else range(1, max(probe.n_labels, int(truth.max()) + 1))
        row = {"subject": s.subject_id}
        for lab in labs:
            row[f"dice_{lab}"] = dice(pred == lab, truth == lab)
        rows.append(row)
    return rows


def mean_dice(rows, label) -> float:
    return float(np.mean([r[f"dice_{label}"] for r in rows]))

"""Training loop: augmentation, total objective, AdamW steps, logging and
checkpoint/resume."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .augmentation import AugmentConfig, maybe_augment
from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .codebook import code_usage
from .data import PhantomDataset
from .evaluation import psnr, ssim_metric, _clamp, _run
from .exceptions import NumericError
from .losses import LOG_COLUMNS, LossWeights, total_loss
from .model import ModelConfig, VQSeq2Seq

logger = logging.getLogger(__name__)

PRECISIONS = {"fast32": torch.float32, "check64": torch.float64}

# Training default for the consistency weight.  With tiny latent norms the
# L2-normalized contrastive gradient is amplified by roughly 1/(tau*|z|) and
# at weight 10 it drowns the reconstruction signal on 32x32 phantoms.
DESK_LAMBDA_CON = 0.01


def desk_weights() -> LossWeights:
    return LossWeights(lambda_con=DESK_LAMBDA_CON)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1
    total_steps: int = 5000
    weights: LossWeights = field(default_factory=desk_weights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 1
    checkpoint_every: int = 1000
    log_every: int = 500
    precision: str = "fast32"
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainState:
    model: VQSeq2Seq
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    order: List[str] = field(default_factory=list)
    cursor: int = 0
    usage: Optional[torch.Tensor] = None  # code histogram since the last validation

    def extra(self, cfg: TrainConfig) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "order": list(self.order),
            "cursor": self.cursor,
            "rng_state": self.rng.bit_generator.state,
            "usage": [] if self.usage is None else self.usage.tolist(),
            "train_config": cfg.to_dict(),
        }


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)


def init_state(cfg: TrainConfig) -> TrainState:
    torch.set_num_threads(1)
    model = VQSeq2Seq(cfg.model).to(PRECISIONS[cfg.precision])
    return TrainState(model, make_optimizer(model, cfg), np.random.default_rng(cfg.seed))


def state_from_checkpoint(path, cfg: TrainConfig) -> TrainState:
    ms = load_checkpoint(path, expected_config=cfg.model)
    model = ms.model.to(PRECISIONS[cfg.precision])
    opt = make_optimizer(model, cfg)
    restore_optimizer(opt, model, ms.optimizer_state)
    ex = ms.extra
    rng = np.random.default_rng()
    rng.bit_generator.state = ex["rng_state"]
    usage = torch.tensor(ex["usage"], dtype=torch.int64) if ex.get("usage") else None
    return TrainState(model, opt, rng, ex["step"], ex["epoch"], list(ex["order"]), ex["cursor"], usage)


def _check_log(log, step):
    comps = {k: float(log[k]) for k in LOG_COLUMNS}
    bad = {k: v for k, v in comps.items() if not math.isfinite(v) or v < -1e-6}
    if bad:
        raise NumericError(f"step {step}: invalid loss components {bad}", comps)
    return comps


def train_step(subjects, state: TrainState, cfg: TrainConfig) -> dict:
    """One optimizer step over ``subjects`` (a SequenceSet or a list of them).

    Each available input is independently passed through ``maybe_augment``;
    targets stay clean.  Returns the component log (floats).
    """
    if not isinstance(subjects, (list, tuple)):
        subjects = [subjects]
    model, rng = state.model, state.rng
    total = 0
    logs = []
    for subject in subjects:
        inputs = np.stack([maybe_augment(subject.images[i], i, model, cfg.augment, rng) for i in subject.available])
        loss, log = total_loss(subject, model, cfg.weights, rng, inputs=inputs)
        total = total + loss
        logs.append(log)
    merged = {k: sum(float(l[k].detach()) for l in logs) for k in LOG_COLUMNS}
    merged["total"] = float(total.detach())
    _check_log(merged, state.step + 1)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    merged["indices"] = torch.cat([l["indices"].reshape(-1) for l in logs])
    return merged


def _next_batch(state: TrainState, ids, batch_size):
    out = []
    while len(out) < batch_size:
        if state.cursor >= len(state.order):
            state.order = [ids[k] for k in state.rng.permutation(len(ids))]
            state.cursor = 0
            state.epoch += 1
        out.append(state.order[state.cursor])
        state.cursor += 1
    return out


def val_self_reconstruction(model, subjects):
    """Mean PSNR / SSIM of i -> i reconstruction over all available sequences."""
    ps, ss = [], []
    for s in subjects:
        X = s.stacked()
        for k, i in enumerate(s.available):
            out = _clamp(_run(model, lambda: model.translate(X[k], i, i)))
            ref = X[k].astype(np.float64)
            ps.append(psnr(out, ref))
            ss.append(ssim_metric(out, ref))
    return float(np.mean(ps)), float(np.mean(ss))


def _perplexity(counts):
    p = counts.double() / counts.sum()
    p = p[p > 0]
    return float(torch.exp(-(p * p.log()).sum()))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _read_rows(path, upto):
    if not Path(path).exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [[_parse(x) for x in r] for r in rows if int(r[0]) <= upto]


def _parse(x):
    try:
        return int(x)
    except ValueError:
        return float(x)


@dataclass
class TrainResult:
    model: VQSeq2Seq
    state: TrainState
    loss_rows: list
    val_rows: list
    checkpoint: Optional[Path]
    out_dir: Path


LOSS_HEADER = ("step",) + LOG_COLUMNS
VAL_HEADER = ("step", "val_psnr", "val_ssim", "used_codes", "perplexity")


def train(dataset, cfg: TrainConfig, out_dir, resume_from=None, stop_after: int | None = None, progress=None) -> TrainResult:
    """Train on the dataset's train split.

    Writes ``loss.csv`` (every step), ``val.csv`` (every ``log_every`` steps
    and at the end), periodic ``ckpt_<step>.vqcm`` and ``final.vqcm``.
    ``stop_after`` interrupts the run after that many total steps, leaving a
    checkpoint to resume from.
    """
    if not isinstance(dataset, PhantomDataset):
        dataset = PhantomDataset(dataset)
    dataset.verify()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ids = dataset.ids("train")
    val = dataset.split("val")
    if not train_ids:
        raise ValueError("dataset has no train subjects")

    if resume_from is not None:
        state = state_from_checkpoint(resume_from, cfg)
    else:
        state = init_state(cfg)
    loss_rows = _read_rows(out / "loss.csv", state.step) if resume_from else []
    val_rows = _read_rows(out / "val.csv", state.step) if resume_from else []
    if state.usage is None:
        state.usage = torch.zeros(cfg.model.K, dtype=torch.int64)
    usage = state.usage

    def validate():
        vp, vs = val_self_reconstruction(state.model, val) if val else (float("nan"), float("nan"))
        val_rows.append([state.step, vp, vs, int((usage > 0).sum()), _perplexity(usage) if usage.sum() else 0.0])
        _write_csv(out / "val.csv", VAL_HEADER, val_rows)
        logger.info("step %d val_psnr %.3f val_ssim %.4f used_codes %d", state.step, vp, vs, int((usage > 0).sum()))

    if state.step == 0:
        validate()
    end = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    ckpt = None
    while state.step < end:
        ids = _next_batch(state, train_ids, cfg.batch_size)
        log = train_step([dataset.subject(s) for s in ids], state, cfg)
        usage += code_usage(log["indices"], cfg.model.K)
        loss_rows.append([state.step] + [log[k] for k in LOG_COLUMNS])
        if progress is not None:
            progress(state.step, log)
        if state.step % cfg.log_every == 0 or state.step == cfg.total_steps:
            validate()
            usage.zero_()
            _write_csv(out / "loss.csv", LOSS_HEADER, loss_rows)
        if state.step % cfg.checkpoint_every == 0 or state.step == end:
            ckpt = out / ("final.vqcm" if state.step == cfg.total_steps else f"ckpt_{state.step:07d}.vqcm")
            save_checkpoint(ckpt, state.model, state.optimizer, state.extra(cfg))
    _write_csv(out / "loss.csv", LOSS_HEADER, loss_rows)
    return TrainResult(state.model, state, loss_rows, val_rows, ckpt, out)

"""Reconstruction, latent consistency and total training objective."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codebook import DEFAULT_BETA, LatentGrid, straight_through, vq_loss
from .exceptions import ShapeError
from .model import one_hot
from .stopgrad import frozen, stop_gradient
from .validation import as_tensor, check_random_state, check_same_shape
from .vqc import SCALE_MODES, foreground_mask, sample_vqc, stats_from_stack

logger = logging.getLogger(__name__)

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

LOG_COLUMNS = ("l1", "ssim", "per", "con_mse", "con_nce", "vq", "total")


@dataclass
class LossWeights:
    """Weights and options of the training objective.

    ``detach_stats`` treats the latent mean/variance as constants in the
    sampled-latent reconstruction term.  ``max_anchors`` caps the number of
    foreground positions in the contrastive term.
    """

    lambda1: float = 10.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda_con: float = 10.0
    lambda_vq: float = 10.0
    tau: float = 0.07
    beta: float = DEFAULT_BETA
    scale_mode: str = "variance"
    detach_stats: bool = False
    max_anchors: int = 256

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda_con", "lambda_vq", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
        if self.max_anchors < 2:
            raise ValueError("max_anchors must be >= 2")

    def to_dict(self):
        return asdict(self)


def _as_batch(x):
    x = as_tensor(x)
    return x.reshape(-1, 1, *x.shape[-2:])


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    check_same_shape(a, b)
    if a.dtype != b.dtype:
        dt = torch.promote_types(a.dtype, b.dtype)
        a, b = a.to(dt), b.to(dt)
    return a, b


# -- L1 ---------------------------------------------------------------------

def l1_per_image(a, b) -> torch.Tensor:
    a, b = _pair(a, b)
    return (_as_batch(a) - _as_batch(b)).abs().flatten(1).mean(1)


def l1_loss(a, b) -> torch.Tensor:
    """Mean absolute difference."""
    return l1_per_image(a, b).mean()


# -- SSIM -------------------------------------------------------------------

@lru_cache(maxsize=8)
def _gauss_1d(dtype):
    r = SSIM_WIN // 2
    x = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return (g / g.sum()).to(dtype)


def _filter(x):
    g = _gauss_1d(x.dtype)
    x = F.conv2d(x, g.view(1, 1, -1, 1))
    return F.conv2d(x, g.view(1, 1, 1, -1))


def ssim_map(a, b, data_range: float = 1.0) -> torch.Tensor:
    """Local SSIM over valid 11x11 Gaussian windows; returns (B, h', w')."""
    a, b = _pair(a, b)
    if min(a.shape[-2:]) < SSIM_WIN:
        raise ShapeError(f"SSIM needs images at least {SSIM_WIN}x{SSIM_WIN}, got {tuple(a.shape[-2:])}")
    x, y = _as_batch(a), _as_batch(b)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter(x), _filter(y)
    sxx = _filter(x * x) - mx * mx
    syy = _filter(y * y) - my * my
    sxy = _filter(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den)[:, 0]


def ssim_per_image(a, b) -> torch.Tensor:
    return ssim_map(a, b).flatten(1).mean(1)


def ssim_loss(a, b) -> torch.Tensor:
    """1 - SSIM, averaged over valid windows (and over the batch)."""
    return 1.0 - ssim_per_image(a, b).mean()


# -- perceptual proxy -------------------------------------------------------

class FixedFeatureExtractor(nn.Module):
    """Frozen random 3-stage conv pyramid used as a perceptual feature space.

    Weights are buffers drawn from a seeded generator, so the extractor
    is never trained and gives bit-identical features for a given seed.
    """

    def __init__(self, seed: int = 0, widths=(8, 16, 32), dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        c_in = 1
        for k, c_out in enumerate(widths):
            fan_in = c_in * 9
            w = torch.randn(c_out, c_in, 3, 3, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / fan_in)
            self.register_buffer(f"w{k}", w.to(dtype))
            c_in = c_out
        self.n_stages = len(widths)

    def forward(self, x):
        feats = []
        h = x
        for k in range(self.n_stages):
            if k:
                h = F.avg_pool2d(h, 2)
            h = F.relu(F.conv2d(h, getattr(self, f"w{k}"), padding=1))
            feats.append(h)
        return feats


@lru_cache(maxsize=8)
def default_extractor(dtype=torch.float32, seed: int = 0) -> FixedFeatureExtractor:
    return FixedFeatureExtractor(seed=seed, dtype=dtype)


def _channel_normalize(f, eps=1e-10):
    return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + eps)


def perceptual_per_image(a, b, extractor=None) -> torch.Tensor:
    a, b = _pair(a, b)
    extractor = extractor or default_extractor(a.dtype)
    fa = extractor(_as_batch(a))
    fb = extractor(_as_batch(b))
    total = 0
    for u, v in zip(fa, fb):
        total = total + (_channel_normalize(u) - _channel_normalize(v)).abs().flatten(1).mean(1)
    return total


def perceptual_loss(a, b, extractor=None) -> torch.Tensor:
    """Sum over stages of mean L1 between channel-normalized features."""
    return perceptual_per_image(a, b, extractor).mean()


# -- reconstruction -----------------------------------------------------------

def rec_terms(xhat, x, extractor=None, with_ssim=True):
    """Per-image (l1, ssim_loss, perceptual) vectors.

    ``with_ssim=False`` returns zeros for the structural term, which lets
    images smaller than the SSIM window be used when its weight is 0.
    """
    l1 = l1_per_image(xhat, x)
    ss = 1.0 - ssim_per_image(xhat, x) if with_ssim else torch.zeros_like(l1)
    return l1, ss, perceptual_per_image(xhat, x, extractor)


def combine_rec(l1, ssim, per, weights: LossWeights):
    return weights.lambda1 * l1 + weights.lambda2 * ssim + weights.lambda3 * per


def rec_loss(xhat, x, weights: LossWeights | None = None, extractor=None):
    """Weighted pixel + structural + perceptual loss.

    Returns ``(total, {"l1": ..., "ssim": ..., "per": ...})``.
    """
    weights = weights or LossWeights()
    l1, ss, per = (t.mean() for t in rec_terms(xhat, x, extractor, weights.lambda2 > 0))
    return combine_rec(l1, ss, per, weights), {"l1": l1, "ssim": ss, "per": per}


# -- latent consistency ------------------------------------------------------

def _vals(z):
    return z.values if isinstance(z, LatentGrid) else as_tensor(z)


def contrastive_term(f1: torch.Tensor, f2: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over matched rows of (P, D) feature matrices.

    Positives are the same position in the other grid; negatives are all
    other positions.  Mean over anchors of the two cross-entropies.
    """
    f1 = F.normalize(f1, dim=-1, eps=1e-12)
    f2 = F.normalize(f2, dim=-1, eps=1e-12)
    logits = f1 @ f2.T / tau
    diag = torch.arange(logits.shape[0])
    ce12 = -torch.log_softmax(logits, dim=1)[diag, diag]
    ce21 = -torch.log_softmax(logits.T, dim=1)[diag, diag]
    return (ce12 + ce21).mean()


def consistency_loss(z1, z2, mask, tau: float = 0.07, rng=None, max_anchors: int = 256, return_parts=False):
    """MSE pull between two quantized grids plus a masked contrastive term.

    ``z1``/``z2`` are (h, w, D) grids; ``mask`` is an (h, w) bool foreground
    mask.  With fewer than 2 foreground positions the contrastive term is
    skipped.  ``return_parts=True`` returns ``(total, mse, nce)``.
    """
    a, b = _vals(z1), _vals(z2)
    if a.shape != b.shape:
        raise ShapeError(f"consistency_loss shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mask = as_tensor(mask).bool()
    if tuple(mask.shape) != tuple(a.shape[:-1]):
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match latent grid {tuple(a.shape[:-1])}")
    mse = ((stop_gradient(a) - b) ** 2).sum(-1).mean() + ((stop_gradient(b) - a) ** 2).sum(-1).mean()
    pos = torch.nonzero(mask.reshape(-1)).reshape(-1)
    if pos.numel() > max_anchors:
        rng = check_random_state(rng)
        pick = np.sort(rng.choice(pos.numel(), size=max_anchors, replace=False))
        pos = pos[torch.from_numpy(pick)]
    pos = frozen(pos)
    if pos.numel() < 2:
        logger.debug("consistency_loss: %d foreground positions, contrastive term skipped", pos.numel())
        nce = torch.zeros((), dtype=a.dtype)
    else:
        D = a.shape[-1]
        nce = contrastive_term(a.reshape(-1, D)[pos], b.reshape(-1, D)[pos], tau)
    total = mse + nce
    return (total, mse, nce) if return_parts else total


# -- total objective ----------------------------------------------------------

def total_loss(subject, model, weights: LossWeights | None = None, rng=None, inputs=None, extractor=None):
    """Full objective for one subject.

    ``inputs`` optionally replaces the encoder inputs (augmented images,
    one per available sequence, in ``subject.available`` order); targets are
    always the clean images.  Returns ``(total, log)`` where ``log`` holds
    unweighted component sums, the weighted total and term counts.
    """
    weights = weights or LossWeights()
    rng = check_random_state(rng)
    avail = subject.available
    n, N = len(avail), model.cfg.N
    dtype = model.dtype
    X = torch.from_numpy(subject.stacked()).to(dtype)
    Xin = X if inputs is None else as_tensor(inputs, dtype).reshape(X.shape)

    z_e = model.encode(Xin)
    z_q = model.quantize(z_e)
    z_st = straight_through(z_e, z_q)

    # every ordered pair (i, j), i-major, including i == j
    codes = torch.stack([one_hot(j, N, dtype) for j in avail])
    cross_z = z_st.values.repeat_interleave(n, dim=0)
    cross_c = codes.repeat(n, 1)
    cross_t = X.repeat(n, 1, 1)

    stack = z_st.values.detach() if weights.detach_stats else z_st.values
    stats = stats_from_stack(stack)
    z_s = sample_vqc(stats, rng, weights.scale_mode)
    s_z = z_s.values.unsqueeze(0).expand(n, *z_s.values.shape)

    out = model.decode(torch.cat([cross_z, s_z]), torch.cat([cross_c, codes]))
    l1, ss, per = rec_terms(out, torch.cat([cross_t, X]), extractor, weights.lambda2 > 0)
    rec = combine_rec(l1, ss, per, weights).sum()

    h, w = z_e.values.shape[1:3]
    masks = foreground_mask(X, (h, w))
    con_mse = torch.zeros((), dtype=dtype)
    con_nce = torch.zeros((), dtype=dtype)
    for a in range(n):
        for b in range(a + 1, n):
            _, m, c = consistency_loss(
                z_st[a], z_st[b], masks[a] & masks[b], weights.tau, rng, weights.max_anchors, return_parts=True
            )
            con_mse = con_mse + m
            con_nce = con_nce + c
    # unordered pairs counted once, doubled to match the symmetric double sum
    con_mse, con_nce = 2 * con_mse, 2 * con_nce

    vq = sum(vq_loss(z_e[a], z_q[a], weights.beta) for a in range(n))

    total = rec + weights.lambda_con * (con_mse + con_nce) + weights.lambda_vq * vq
    log = {
        "l1": l1.sum(),
        "ssim": ss.sum(),
        "per": per.sum(),
        "con_mse": con_mse,
        "con_nce": con_nce,
        "vq": vq,
        "total": total,
        "n_cross": n * n,
        "n_sampled": n,
        "n_con_pairs": n * (n - 1) // 2,
        "n_vq": n,
        "indices": z_q.indices,
    }
    return total, log

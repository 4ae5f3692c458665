"""Common latent space statistics across the available sequences of a subject.

The per-position mean and sample variance of the quantized latents define a
diagonal Gaussian; :func:`sample_vqc` draws reparameterized samples from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch

from .codebook import LatentGrid
from .exceptions import ShapeError
from .stopgrad import frozen
from .validation import as_tensor, check_random_state

SCALE_MODES = ("variance", "std")
FOREGROUND_THRESHOLD = 0.01


@dataclass
class SequenceSet:
    """One subject: N image slots plus availability flags.

    ``images[i]`` is None exactly when ``flags[i] == 0``.
    """

    images: List[Optional[np.ndarray]]
    flags: np.ndarray = None
    subject_id: str = ""
    tissue_map: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        derived = np.array([img is not None for img in self.images], dtype=np.int64)
        if self.flags is None:
            self.flags = derived
        self.flags = np.asarray(self.flags, dtype=np.int64)
        if self.flags.shape != (len(self.images),):
            raise ShapeError(f"flags length {self.flags.shape} does not match {len(self.images)} image slots")
        if not np.array_equal(self.flags, derived):
            raise ValueError(f"flags {self.flags.tolist()} disagree with present images {derived.tolist()}")
        if self.flags.sum() < 1:
            raise ValueError("a SequenceSet needs at least one available sequence")

    @property
    def N(self) -> int:
        return len(self.images)

    @property
    def available(self) -> List[int]:
        return [i for i, f in enumerate(self.flags) if f]

    def stacked(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = self.available if indices is None else indices
        return np.stack([np.asarray(self.images[i], dtype=np.float32) for i in idx])


@dataclass
class VQCStats:
    mu: torch.Tensor
    var: torch.Tensor
    count: int


def _stack_available(latents, flags):
    if flags is None:
        present = [z for z in latents if z is not None]
    else:
        flags = np.asarray(flags)
        if len(flags) != len(latents):
            raise ShapeError(f"{len(latents)} latents but {len(flags)} flags")
        present = [z for z, f in zip(latents, flags) if f]
        if any(z is None for z in present):
            raise ValueError("a flagged sequence has no latent")
    if not present:
        raise ValueError("estimate_vqc needs at least one available latent")
    vals = [z.values if isinstance(z, LatentGrid) else as_tensor(z) for z in present]
    shape = tuple(vals[0].shape)
    for v in vals[1:]:
        if tuple(v.shape) != shape:
            raise ShapeError(f"latent shape mismatch: {shape} vs {tuple(v.shape)}")
    return torch.stack(vals)


def stats_from_stack(z: torch.Tensor) -> VQCStats:
    """Statistics over the leading axis of an (n, ...) tensor."""
    n = z.shape[0]
    # shifted by the first latent so identical latents give mu exact, var 0
    mu = z[0] + (z - z[0]).mean(dim=0)
    if n == 1:
        # n - 1 denominator is zero; collapse to a point mass at mu
        var = torch.zeros_like(mu)
    else:
        var = ((z - mu) ** 2).sum(dim=0) / (n - 1)
    return VQCStats(mu, var, n)


def estimate_vqc(latents, flags=None) -> VQCStats:
    """Mean and sample variance (denominator count - 1) of quantized latents.

    ``latents`` is aligned with ``flags``; entries whose flag is 0 are
    ignored and may be None.
    """
    return stats_from_stack(_stack_available(latents, flags))


def sample_vqc(stats: VQCStats, rng=None, scale_mode: str = "variance") -> LatentGrid:
    """Reparameterized draw ``mu + eps * scale`` with eps ~ N(0, 1).

    ``scale_mode="variance"`` multiplies eps by the variance itself;
    ``"std"`` uses its square root.
    """
    if scale_mode not in SCALE_MODES:
        raise ValueError(f"scale_mode must be one of {SCALE_MODES}, got {scale_mode!r}")
    rng = check_random_state(rng)
    mu, var = stats.mu, stats.var
    eps = torch.from_numpy(rng.standard_normal(tuple(mu.shape))).to(mu.dtype)
    eps = frozen(eps)
    if scale_mode == "variance":
        scale = var
    else:
        # where-guarded so var == 0 gives a zero (not NaN) gradient
        pos = var > 0
        scale = torch.where(pos, torch.sqrt(torch.where(pos, var, torch.ones_like(var))), torch.zeros_like(var))
    return LatentGrid(mu + eps * scale)


def foreground_mask(X, latent_shape, threshold: float = FOREGROUND_THRESHOLD) -> torch.Tensor:
    """Pixel mask ``X > threshold`` max-pooled down to the latent grid.

    ``X`` is (H, W) or (B, H, W); ``latent_shape`` gives (h, w) as its first
    two entries.  Returns a bool tensor of shape (h, w) or (B, h, w).
    """
    X = as_tensor(X)
    h, w = int(latent_shape[0]), int(latent_shape[1])
    H, W = X.shape[-2:]
    if H % h or W % w:
        raise ShapeError(f"image {H}x{W} is not a multiple of latent grid {h}x{w}")
    m = X > threshold
    m = m.reshape(*X.shape[:-2], h, H // h, w, W // w)
    return m.any(dim=-1).any(dim=-2)

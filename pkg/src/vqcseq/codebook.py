"""Discrete latent vocabulary: nearest-code quantization and the VQ losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .exceptions import ShapeError
from .stopgrad import frozen, stop_gradient
from .validation import check_int

DEFAULT_BETA = 0.25


@dataclass
class LatentGrid:
    """Grid of D-dim latent vectors, channel-last: ``values`` is (..., h, w, D).

    ``indices`` is present only for quantized grids and holds the code index
    of every spatial position.
    """

    values: torch.Tensor
    indices: Optional[torch.Tensor] = None

    @property
    def kind(self) -> str:
        return "continuous" if self.indices is None else "quantized"

    @property
    def shape(self):
        return tuple(self.values.shape)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def __getitem__(self, item) -> "LatentGrid":
        # Indexes leading (batch) dimensions only.
        idx = None if self.indices is None else self.indices[item]
        return LatentGrid(self.values[item], idx)

    def detach(self) -> "LatentGrid":
        idx = None if self.indices is None else self.indices.detach()
        return LatentGrid(self.values.detach(), idx)


class Codebook(nn.Module):
    """K x D embedding table."""

    def __init__(self, embeddings: torch.Tensor):
        super().__init__()
        if embeddings.ndim != 2:
            raise ShapeError(f"codebook must be 2-D (K, D), got {tuple(embeddings.shape)}")
        K, D = embeddings.shape
        if K < 2 or D < 1:
            raise ValueError(f"codebook needs K >= 2 and D >= 1, got K={K}, D={D}")
        if not torch.isfinite(embeddings).all():
            raise ValueError("codebook entries must be finite")
        self.embeddings = nn.Parameter(embeddings.clone())

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def D(self) -> int:
        return self.embeddings.shape[1]

    def forward(self, z_e: LatentGrid) -> LatentGrid:
        return quantize(z_e, self)


def init_codebook(K: int, D: int, seed: int = 0, dtype=torch.float32) -> Codebook:
    """Codebook with entries drawn from U(-1/K, 1/K)."""
    K = check_int(K, "K", minimum=2)
    D = check_int(D, "D", minimum=1)
    gen = torch.Generator().manual_seed(int(seed))
    emb = torch.rand(K, D, generator=gen, dtype=torch.float64)
    emb = (emb * 2.0 - 1.0) / K
    return Codebook(emb.to(dtype))


def _values(z) -> torch.Tensor:
    return z.values if isinstance(z, LatentGrid) else z


def quantize(z_e, cb: Codebook) -> LatentGrid:
    """Snap every latent vector to its nearest codebook row.

    Distances are squared Euclidean; ties go to the lowest index.
    The returned values are rows of ``cb.embeddings`` (so they carry
    gradient to the codebook, not to ``z_e``).
    """
    z = _values(z_e)
    emb = cb.embeddings
    if z.shape[-1] != emb.shape[1]:
        raise ShapeError(f"latent dim {z.shape[-1]} does not match codebook D={emb.shape[1]}")
    with torch.no_grad():
        flat = z.detach().reshape(-1, 1, z.shape[-1]).to(emb.dtype)
        dist = ((flat - emb.detach().unsqueeze(0)) ** 2).sum(-1)
        # argmin returns the first minimal index, i.e. lowest-index tie-breaking.
        idx = dist.argmin(dim=1).reshape(z.shape[:-1])
    idx = frozen(idx)
    return LatentGrid(emb[idx], idx)


def straight_through(z_e, z_q: LatentGrid) -> LatentGrid:
    """``z_e + sg[z_q - z_e]``: forward equals z_q, backward is identity to z_e."""
    ze, zq = _values(z_e), _values(z_q)
    if ze.shape != zq.shape:
        raise ShapeError(f"straight_through shape mismatch: {tuple(ze.shape)} vs {tuple(zq.shape)}")
    out = ze + stop_gradient(zq - ze)
    return LatentGrid(out, z_q.indices if isinstance(z_q, LatentGrid) else None)


def vq_loss(z_e, z_q, beta: float = DEFAULT_BETA) -> torch.Tensor:
    """Codebook term plus beta-weighted commitment term.

    Both are squared L2 norms per position, averaged over positions.
    ``z_q`` must be the raw codebook rows (not the straight-through output)
    for the codebook term to reach the embeddings.
    """
    ze, zq = _values(z_e), _values(z_q)
    if ze.shape != zq.shape:
        raise ShapeError(f"vq_loss shape mismatch: {tuple(ze.shape)} vs {tuple(zq.shape)}")
    codebook_term = ((stop_gradient(ze) - zq) ** 2).sum(-1).mean()
    commitment = ((stop_gradient(zq) - ze) ** 2).sum(-1).mean()
    return codebook_term + beta * commitment


def code_usage(indices: torch.Tensor, K: int) -> torch.Tensor:
    """Histogram of code indices, length K."""
    return torch.bincount(indices.reshape(-1).long(), minlength=K)

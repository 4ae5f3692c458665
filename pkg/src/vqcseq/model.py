"""Shared encoder, style-conditioned decoder and the translation operation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .codebook import LatentGrid, init_codebook, quantize, straight_through
from .exceptions import ShapeError
from .validation import as_tensor, check_divisible, check_image, check_int

TRANSLATE_MODES = ("quantized", "continuous_bypass")


@dataclass
class ModelConfig:
    D: int = 3
    K: int = 256
    N: int = 4
    base_channels: int = 32
    downsample_stages: int = 2
    seed: int = 0

    def __post_init__(self):
        check_int(self.D, "D", minimum=1)
        check_int(self.K, "K", minimum=2)
        check_int(self.N, "N", minimum=1)
        check_int(self.base_channels, "base_channels", minimum=1)
        check_int(self.downsample_stages, "downsample_stages", minimum=1)
        check_int(self.seed, "seed")

    def channels(self, stage: int) -> int:
        # width doubles once after the first downsampling and then stays flat
        return self.base_channels * (1 if stage == 0 else 2)

    def to_dict(self) -> dict:
        return asdict(self)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        s = cfg.downsample_stages
        self.inp = nn.Conv2d(1, cfg.channels(0), 3, padding=1)
        self.down = nn.ModuleList(
            nn.Conv2d(cfg.channels(k), cfg.channels(k + 1), 4, stride=2, padding=1) for k in range(s)
        )
        cb = cfg.channels(s)
        self.res = nn.Sequential(ResBlock(cb), ResBlock(cb))
        self.out = nn.Conv2d(cb, cfg.D, 1)

    def forward(self, x):
        h = F.silu(self.inp(x))
        for conv in self.down:
            h = F.silu(conv(h))
        h = self.res(h)
        return self.out(F.silu(h))


class StyleMapping(nn.Module):
    """Maps a style code to per-stage (scale, shift) pairs."""

    def __init__(self, n_codes, widths, hidden=64):
        super().__init__()
        self.widths = list(widths)
        self.fc1 = nn.Linear(n_codes, hidden)
        self.fc2 = nn.Linear(hidden, 2 * sum(self.widths))

    def forward(self, c):
        p = self.fc2(F.silu(self.fc1(c)))
        out = []
        for w, chunk in zip(self.widths, torch.split(p, [2 * w for w in self.widths], dim=1)):
            gamma, beta = chunk.chunk(2, dim=1)
            out.append((gamma[:, :, None, None], beta[:, :, None, None]))
        return out


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        s = cfg.downsample_stages
        cb = cfg.channels(s)
        self.inp = nn.Conv2d(cfg.D, cb, 1)
        self.res = nn.Sequential(ResBlock(cb), ResBlock(cb))
        self.up = nn.ModuleList(
            nn.Conv2d(cfg.channels(k + 1), cfg.channels(k), 3, padding=1) for k in reversed(range(s))
        )
        widths = [cb] + [cfg.channels(k) for k in reversed(range(s))]
        self.style = StyleMapping(cfg.N, widths)
        self.out = nn.Conv2d(cfg.channels(0), 1, 3, padding=1)

    def forward(self, z, c):
        mods = self.style(c)
        h = self.res(self.inp(z))
        gamma, beta = mods[0]
        h = F.silu(h * (1 + gamma) + beta)
        for conv, (gamma, beta) in zip(self.up, mods[1:]):
            h = conv(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = F.silu(h * (1 + gamma) + beta)
        # linear output, clamped only at export time
        return self.out(h)


def one_hot(j: int, n: int, dtype=torch.float32) -> torch.Tensor:
    if not 0 <= j < n:
        raise IndexError(f"sequence index {j} out of range for N={n}")
    c = torch.zeros(n, dtype=dtype)
    c[j] = 1
    return c


class VQSeq2Seq(nn.Module):
    """Encoder E, codebook and dynamic decoder G.

    Images are (H, W) or (B, H, W); latents are channel-last
    :class:`LatentGrid` values of shape (B?, h, w, D).  Sequence indices are
    0-based.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.encoder = Encoder(cfg)
            self.decoder = Decoder(cfg)
        self.codebook = init_codebook(cfg.K, cfg.D, seed=cfg.seed)

    @property
    def dtype(self):
        return self.codebook.embeddings.dtype

    def _prep_image(self, X):
        X = check_image(as_tensor(X, self.dtype))
        check_divisible(X.shape, self.cfg.downsample_stages)
        return X

    def _prep_code(self, c, batch):
        c = as_tensor(c, self.dtype)
        if c.shape[-1] != self.cfg.N or c.ndim > 2:
            raise ShapeError(f"style code must have length N={self.cfg.N}, got shape {tuple(c.shape)}")
        if c.ndim == 1:
            c = c.unsqueeze(0).expand(batch, -1)
        elif c.shape[0] != batch:
            raise ShapeError(f"style code batch {c.shape[0]} does not match latent batch {batch}")
        return c

    def encode(self, X) -> LatentGrid:
        X = self._prep_image(X)
        single = X.ndim == 2
        x = X.reshape(-1, 1, *X.shape[-2:])
        z = self.encoder(x).permute(0, 2, 3, 1)
        return LatentGrid(z[0] if single else z)

    def quantize(self, z_e) -> LatentGrid:
        return quantize(z_e, self.codebook)

    def decode(self, z, c) -> torch.Tensor:
        v = z.values if isinstance(z, LatentGrid) else as_tensor(z, self.dtype)
        if v.ndim not in (3, 4) or v.shape[-1] != self.cfg.D:
            raise ShapeError(f"latent must be (B?, h, w, D={self.cfg.D}), got {tuple(v.shape)}")
        single = v.ndim == 3
        v = v.reshape(-1, *v.shape[-3:]).permute(0, 3, 1, 2)
        out = self.decoder(v, self._prep_code(c, v.shape[0]))[:, 0]
        return out[0] if single else out

    def translate(self, X, source: int, target: int, mode: str = "quantized") -> torch.Tensor:
        """Render image X of sequence ``source`` as sequence ``target``."""
        N = self.cfg.N
        for name, v in (("source", source), ("target", target)):
            if not 0 <= v < N:
                raise IndexError(f"{name} index {v} out of range for N={N}")
        if mode not in TRANSLATE_MODES:
            raise ValueError(f"mode must be one of {TRANSLATE_MODES}, got {mode!r}")
        z_e = self.encode(X)
        z = z_e if mode == "continuous_bypass" else straight_through(z_e, self.quantize(z_e))
        return self.decode(z, one_hot(target, N, self.dtype))

    def translate_chain(self, X, chain, mode: str = "quantized") -> torch.Tensor:
        """Apply translate along consecutive pairs of ``chain``.

        Intermediate renderings are clamped to [0, 1] before being fed back
        in, since they stand in for real images.  A length-1 chain is a
        self-reconstruction.
        """
        if len(chain) == 1:
            return self.translate(X, chain[0], chain[0], mode)
        out = X
        steps = list(zip(chain[:-1], chain[1:]))
        for k, (a, b) in enumerate(steps):
            if k:
                out = out.clamp(0, 1)
            out = self.translate(out, a, b, mode)
        return out

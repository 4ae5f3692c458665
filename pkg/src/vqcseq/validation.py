"""Input validation helpers shared by the public API."""

from __future__ import annotations

import numbers

import numpy as np
import torch

from .exceptions import ShapeError


def as_tensor(x, dtype=None) -> torch.Tensor:
    """Convert numpy arrays / scalars to a tensor without copying tensors."""
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    arr = np.asarray(x)
    t = torch.from_numpy(np.ascontiguousarray(arr))
    if dtype is not None:
        t = t.to(dtype)
    elif t.is_floating_point() and t.dtype not in (torch.float32, torch.float64):
        t = t.to(torch.float32)
    return t


def to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def check_image(x, name="image", *, allow_batch=True, finite=True):
    """Validate a single-channel image of shape (H, W) or (B, H, W)."""
    ndim = x.ndim
    if ndim not in ((2, 3) if allow_batch else (2,)):
        raise ShapeError(f"{name} must be 2-D (H, W){' or 3-D (B, H, W)' if allow_batch else ''}, got shape {tuple(x.shape)}")
    if finite:
        ok = torch.isfinite(x).all() if isinstance(x, torch.Tensor) else np.isfinite(x).all()
        if not bool(ok):
            raise ValueError(f"{name} contains non-finite values")
    return x


def check_same_shape(a, b, names=("a", "b")):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {names[0]} {tuple(a.shape)} vs {names[1]} {tuple(b.shape)}")


def check_divisible(shape, stages: int):
    f = 2**stages
    h, w = shape[-2], shape[-1]
    if h % f or w % f:
        raise ShapeError(f"image dims {h}x{w} not divisible by 2**{stages}={f}")


def check_int(value, name, minimum=None):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_range(lo_hi, name):
    lo, hi = lo_hi
    if not lo <= hi:
        raise ValueError(f"{name} must be ordered (lo <= hi), got {lo_hi!r}")
    return float(lo), float(hi)


def check_random_state(rng) -> np.random.Generator:
    """Accept None, an int seed or a Generator; return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, numbers.Integral):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a numpy Generator from {rng!r}")

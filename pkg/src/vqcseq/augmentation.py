"""Random domain augmentation: intensity transforms and model-based re-rendering."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
import torch

from .model import one_hot
from .validation import check_random_state, check_range

BRANCHES = ("intensity", "cross_sequence", "random_domain")
BIAS_ORDER = 3


@dataclass
class AugmentConfig:
    gamma_range: Tuple[float, float] = (0.95, 1.05)
    noise_sigma_range: Tuple[float, float] = (0.0, 0.1)
    bias_scale: float = 0.2
    bias_alpha_range: Tuple[float, float] = (0.0, 2.0)
    replace_probability: float = 0.5

    def __post_init__(self):
        self.gamma_range = check_range(self.gamma_range, "gamma_range")
        self.noise_sigma_range = check_range(self.noise_sigma_range, "noise_sigma_range")
        self.bias_alpha_range = check_range(self.bias_alpha_range, "bias_alpha_range")
        if self.gamma_range[0] <= 0:
            raise ValueError("gamma_range must be positive")
        if self.noise_sigma_range[0] < 0 or self.bias_alpha_range[0] < 0 or self.bias_scale < 0:
            raise ValueError("noise sigma, bias alpha and bias scale must be non-negative")
        if not 0.0 <= self.replace_probability <= 1.0:
            raise ValueError(f"replace_probability must be in [0, 1], got {self.replace_probability}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _image(X):
    X = np.asarray(X)
    return X if X.dtype.kind == "f" else X.astype(np.float32)


def gamma_transform(X, gamma: float) -> np.ndarray:
    """Pixelwise ``X ** gamma`` clipped to [0, 1]."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    X = _image(X)
    return np.clip(np.power(np.clip(X, 0, None), gamma), 0, 1).astype(X.dtype, copy=False)


def add_noise(X, sigma: float, rng=None) -> np.ndarray:
    """Additive Gaussian noise with std ``sigma``, clipped to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    X = _image(X)
    if sigma == 0:
        return X.copy()
    rng = check_random_state(rng)
    noise = rng.normal(0.0, sigma, size=X.shape)
    return np.clip(X + noise, 0, 1).astype(X.dtype)


def _monomials(order=BIAS_ORDER):
    return [(a, b) for a in range(order + 1) for b in range(order + 1 - a)]


def polynomial_field(shape, coeffs, alpha: float) -> np.ndarray:
    """``exp(alpha * P(u, v))`` on normalized coordinates u, v in [-1, 1]."""
    H, W = shape
    u = np.linspace(-1.0, 1.0, H)[:, None]
    v = np.linspace(-1.0, 1.0, W)[None, :]
    P = np.zeros((H, W))
    for c, (a, b) in zip(coeffs, _monomials()):
        P = P + c * u**a * v**b
    return np.exp(alpha * P)


def sample_bias_coeffs(scale: float, rng) -> np.ndarray:
    return rng.uniform(-scale, scale, size=len(_monomials()))


def bias_field(X, alpha: float, scale: float = 0.2, rng=None, return_field=False):
    """Multiply by a smooth random field ``exp(alpha * P)``, clip to [0, 1].

    P is a random order-3 bivariate polynomial with coefficients drawn from
    U(-scale, scale).  ``alpha = 0`` is the identity.
    """
    if alpha < 0 or scale < 0:
        raise ValueError(f"alpha and scale must be >= 0, got alpha={alpha}, scale={scale}")
    X = _image(X)
    rng = check_random_state(rng)
    coeffs = sample_bias_coeffs(scale, rng)
    field = polynomial_field(X.shape[-2:], coeffs, alpha)
    out = X.copy() if alpha == 0 else np.clip(X * field, 0, 1).astype(X.dtype)
    if return_field:
        return out, field, coeffs
    return out


def intensity_transform(X, cfg: AugmentConfig, rng) -> np.ndarray:
    """Gamma, then noise, then bias field, each with fresh parameters."""
    gamma = rng.uniform(*cfg.gamma_range)
    sigma = rng.uniform(*cfg.noise_sigma_range)
    alpha = rng.uniform(*cfg.bias_alpha_range)
    out = gamma_transform(X, gamma)
    out = add_noise(out, sigma, rng)
    return bias_field(out, alpha, cfg.bias_scale, rng)


def _render(model, X, code) -> np.ndarray:
    X = _image(X)
    with torch.no_grad():
        z_q = model.quantize(model.encode(X))
        out = model.decode(z_q, torch.as_tensor(code, dtype=model.dtype))
    return np.clip(out.cpu().numpy(), 0, 1).astype(X.dtype)


def augment_cross_sequence(X, i: int, model, rng=None) -> np.ndarray:
    """Re-render X as a uniformly chosen other sequence (one-hot code)."""
    rng = check_random_state(rng)
    N = model.cfg.N
    others = [j for j in range(N) if j != i]
    if not others:
        return _image(X).copy()
    r = others[int(rng.integers(len(others)))]
    return _render(model, X, one_hot(r, N, model.dtype))


def augment_random_domain(X, model, rng=None, return_code=False):
    """Re-render X with a style code drawn from U(0, 1)^N."""
    rng = check_random_state(rng)
    code = rng.uniform(0.0, 1.0, size=model.cfg.N)
    out = _render(model, X, code)
    return (out, code) if return_code else out


def maybe_augment(X, i: int, model, cfg: AugmentConfig, rng=None, return_branch=False):
    """With probability ``cfg.replace_probability`` replace X by one augmentation.

    The branch is chosen uniformly from intensity / cross-sequence /
    random-domain.  Model-based branches run without gradient tracking.
    """
    rng = check_random_state(rng)
    X = _image(X)
    branch = None
    if rng.random() >= cfg.replace_probability:
        out = X
    else:
        branch = BRANCHES[int(rng.integers(3))]
        if branch == "intensity":
            out = intensity_transform(X, cfg, rng)
        elif branch == "cross_sequence":
            out = augment_cross_sequence(X, i, model, rng)
        else:
            out = augment_random_domain(X, model, rng)
    return (out, branch) if return_branch else out

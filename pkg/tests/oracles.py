"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (Python loops, numpy)
and deliberately shares no code with the package.
"""

import math

import numpy as np
import torch

from vqcseq.stopgrad import StopGradientTape


def brute_force_nearest(z, emb):
    """Index of the nearest row of ``emb`` for every vector in ``z`` (..., D)."""
    z = np.asarray(z, dtype=np.float64)
    emb = np.asarray(emb, dtype=np.float64)
    flat = z.reshape(-1, z.shape[-1])
    out = np.empty(len(flat), dtype=np.int64)
    for p, v in enumerate(flat):
        best, best_d = 0, math.inf
        for k, e in enumerate(emb):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(v, e))
            if d < best_d:
                best, best_d = k, d
        out[p] = best
    return out.reshape(z.shape[:-1])


def two_pass_stats(stack):
    """Textbook two-pass mean and sample variance over axis 0."""
    x = np.asarray(stack, dtype=np.float64)
    n = x.shape[0]
    mean = np.zeros(x.shape[1:])
    for k in range(n):
        mean += x[k]
    mean /= n
    var = np.zeros(x.shape[1:])
    if n > 1:
        for k in range(n):
            var += (x[k] - mean) ** 2
        var /= n - 1
    return mean, var


def maxpool_mask(img, h, w, thr=0.01):
    img = np.asarray(img)
    H, W = img.shape
    fy, fx = H // h, W // w
    out = np.zeros((h, w), dtype=bool)
    for a in range(h):
        for b in range(w):
            out[a, b] = bool((img[a * fy : (a + 1) * fy, b * fx : (b + 1) * fx] > thr).any())
    return out


def reference_ssim(a, b):
    """scikit-image SSIM with the standard Gaussian-window settings."""
    from skimage.metrics import structural_similarity

    return structural_similarity(
        np.asarray(a, dtype=np.float64),
        np.asarray(b, dtype=np.float64),
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        data_range=1.0,
    )


def contrastive_closed_form(tau):
    """Two anchors, identical orthogonal unit features in both grids."""
    one = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + math.exp(0.0)))
    return 2 * one


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(fn, params, h=1e-6):
    """Compare autograd gradients of ``fn()`` with central differences.

    ``params`` is a list of ``(tensor, flat_index)``.  Stop-gradient values
    and non-differentiable selections are recorded on the first pass and
    replayed on the perturbed passes, so the finite differences measure the
    same function that autograd differentiates.  Returns a list of
    ``(analytic, numeric)`` pairs.
    """
    tape = StopGradientTape()
    for p, _ in params:
        p.grad = None
    with tape.record():
        loss = fn()
    loss.backward()
    pairs = []
    for p, idx in params:
        analytic = float(p.grad.reshape(-1)[idx]) if p.grad is not None else 0.0
        flat = p.data.view(-1)
        orig = float(flat[idx])
        vals = []
        for sign in (1, -1):
            flat[idx] = orig + sign * h
            with torch.no_grad(), tape.replay():
                vals.append(float(fn()))
        flat[idx] = orig
        pairs.append((analytic, (vals[0] - vals[1]) / (2 * h)))
    return pairs

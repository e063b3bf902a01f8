"""
Array container checks, convolution and log-space special functions.

A Volume is a ``numpy`` array of shape ``(C, H, W)``: channel-major then
row-major, finite on construction. Everything here is a pure function.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from scipy import special

from uflow.shared.errors import DomainError, NumericError, ParameterError, ShapeError

_TINY = 1e-300
_CF_MAX_ITER = 10_000


def as_volume(data, name: str = "volume") -> np.ndarray:
    """Validate ``data`` as a finite C×H×W volume and return it as an array."""
    array = np.asarray(data)
    if array.ndim != 3 or min(array.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty C×H×W array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ShapeError(f"{name} contains non-finite entries")
    return array


def conv2d(volume, kernel, bias, k: int) -> np.ndarray:
    """Cross-correlate a volume with a ``[C_out, C_in, k, k]`` kernel, zero same-padding."""
    volume = as_volume(volume)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if k not in (1, 3):
        raise ShapeError(f"kernel size must be 1 or 3, got {k}")
    if kernel.ndim != 4 or kernel.shape[2:] != (k, k):
        raise ShapeError(f"kernel must have shape [C_out, C_in, {k}, {k}], got {kernel.shape}")
    if kernel.shape[1] != volume.shape[0]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, volume has {volume.shape[0]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias must have shape ({kernel.shape[0]},), got {bias.shape}")

    out = F.conv2d(
        torch.from_numpy(volume.astype(np.float64))[None],
        torch.from_numpy(kernel),
        torch.from_numpy(bias),
        padding=k // 2,
    )
    return out[0].numpy()


def _continued_fraction(a: np.ndarray, b: np.ndarray, x: float, dtype) -> np.ndarray:
    """Modified Lentz evaluation of the incomplete beta continued fraction."""
    a = a.astype(dtype)
    b = b.astype(dtype)
    x = dtype(x)
    eps = np.finfo(dtype).eps * 4

    qab, qap, qam = a + b, a + 1, a - 1
    c = np.ones_like(a)
    d = 1 - qab * x / qap
    d = np.where(np.abs(d) < _TINY, _TINY, d)
    d = 1 / d
    h = d.copy()

    active = np.arange(a.size)
    for m in range(1, _CF_MAX_ITER + 1):
        aa_, bb_, qab_, qap_, qam_ = a[active], b[active], qab[active], qap[active], qam[active]
        c_, d_ = c[active], d[active]
        m2 = 2 * m

        num = m * (bb_ - m) * x / ((qam_ + m2) * (aa_ + m2))
        d_ = 1 + num * d_
        d_ = 1 / np.where(np.abs(d_) < _TINY, _TINY, d_)
        c_ = 1 + num / c_
        c_ = np.where(np.abs(c_) < _TINY, _TINY, c_)
        step = d_ * c_

        num = -(aa_ + m) * (qab_ + m) * x / ((aa_ + m2) * (qap_ + m2))
        d_ = 1 + num * d_
        d_ = 1 / np.where(np.abs(d_) < _TINY, _TINY, d_)
        c_ = 1 + num / c_
        c_ = np.where(np.abs(c_) < _TINY, _TINY, c_)
        delta = d_ * c_

        h[active] *= step * delta
        c[active], d[active] = c_, d_
        active = active[np.abs(delta - 1) >= eps]
        if active.size == 0:
            return h
    raise NumericError("incomplete beta continued fraction did not converge", layer="log_binomial_tail")


def _log_betainc(a: np.ndarray, b: np.ndarray, x: float, high_precision: bool) -> np.ndarray:
    """log I_x(a, b) for arrays a, b > 0 and scalar 0 < x < 1."""
    dtype = np.longdouble if high_precision else np.float64
    front = a * np.log(x) + b * np.log1p(-x) - special.betaln(a, b)
    direct = x < (a + 1) / (a + b + 2)

    out = np.empty(a.shape, dtype=np.float64)
    if direct.any():
        cf = _continued_fraction(a[direct], b[direct], x, dtype)
        out[direct] = front[direct] - np.log(a[direct]) + np.log(cf).astype(np.float64)
    flipped = ~direct
    if flipped.any():
        cf = _continued_fraction(b[flipped], a[flipped], 1 - x, dtype)
        upper = np.exp(front[flipped] - np.log(b[flipped]) + np.log(cf).astype(np.float64))
        out[flipped] = np.log1p(-np.minimum(upper, 1.0))
    return out


def log_binomial_tail(k, n, q: float, high_precision: bool = False):
    """
    Natural log of P[X >= k] for X ~ Binomial(n, q), continuously extended.

    Non-integer ``k`` and ``n`` go through the regularized incomplete beta
    function I_q(k, n - k + 1), which agrees with the tail sum at integers.
    Accepts scalars or broadcastable arrays; returns the same kind.
    """
    if not 0 < q < 1:
        raise DomainError(f"q must lie in (0, 1), got {q}")
    k_arr, n_arr = np.broadcast_arrays(np.asarray(k, dtype=np.float64), np.asarray(n, dtype=np.float64))
    if np.any(n_arr <= 0) or np.any(k_arr < 0) or np.any(k_arr > n_arr):
        raise DomainError("log_binomial_tail needs 0 <= k <= n and n > 0")

    out = np.zeros(k_arr.shape, dtype=np.float64)
    positive = k_arr > 0
    if positive.any():
        a = k_arr[positive]
        out[positive] = _log_betainc(a, n_arr[positive] - a + 1, q, high_precision)
    if out.ndim == 0:
        return float(out)
    return out


def chi2_quantile(p: float) -> float:
    """Quantile of the chi-squared distribution with one degree of freedom."""
    if not 0 <= p < 1:
        raise DomainError(f"p must lie in [0, 1), got {p}")
    # CDF(x) = erf(sqrt(x / 2)) inverts in closed form.
    return float(2.0 * special.erfinv(p) ** 2)


def block_counts(mask, w: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Count 1-voxels in the w×w×C block centered on every pixel.

    Windows are truncated at the borders; the second array holds the
    effective block size (truncated area times C) of every pixel.
    """
    mask = as_volume(mask, name="mask")
    if w < 1 or w % 2 == 0:
        raise ParameterError(f"window size must be a positive odd integer, got {w}")
    channels, height, width = mask.shape
    if w > 2 * min(height, width) - 1:
        raise ParameterError(f"window size {w} exceeds the {height}x{width} grid")

    per_pixel = mask.astype(np.int64).sum(axis=0)
    integral = np.zeros((height + 1, width + 1), dtype=np.int64)
    integral[1:, 1:] = per_pixel.cumsum(axis=0).cumsum(axis=1)

    r = w // 2
    rows = np.arange(height)
    cols = np.arange(width)
    top, bottom = np.maximum(rows - r, 0), np.minimum(rows + r, height - 1) + 1
    left, right = np.maximum(cols - r, 0), np.minimum(cols + r, width - 1) + 1

    counts = (
        integral[np.ix_(bottom, right)]
        - integral[np.ix_(top, right)]
        - integral[np.ix_(bottom, left)]
        + integral[np.ix_(top, left)]
    )
    area = (bottom - top)[:, None] * (right - left)[None, :]
    return counts, area * channels

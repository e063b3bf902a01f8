"""
Invertible layer primitives of the U-shaped flow.

Each functional op takes a ``[B, C, H, W]`` tensor (or a single ``[C, H, W]``
volume) and returns ``(output, logdet)``; with ``reverse=True`` it applies the
inverse map and returns the inverse map's log-determinant (the negation).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from torch import nn

from uflow.shared.errors import InvertibilityError, ShapeError

ACTNORM_STD_FLOOR = 1e-6


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise ShapeError(f"expected a [B, C, H, W] tensor or a [C, H, W] volume, got {tuple(x.shape)}")
    return x, False


def _restore(y: torch.Tensor, logdet: torch.Tensor, single: bool):
    if single:
        return y[0], logdet[0]
    return y, logdet


def actnorm(x: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor, reverse: bool = False):
    """Per-channel affine map y = s·x + b."""
    x, single = _as_batch(x)
    if bool((scale == 0).any()):
        raise InvertibilityError("actnorm scale has a zero entry")
    if scale.numel() != x.shape[1]:
        raise ShapeError(f"actnorm has {scale.numel()} channels, input has {x.shape[1]}")
    s = scale.view(1, -1, 1, 1)
    b = bias.view(1, -1, 1, 1)
    logdet = x.shape[2] * x.shape[3] * torch.log(torch.abs(scale)).sum()
    logdet = logdet.expand(x.shape[0])
    if reverse:
        return _restore((x - b) / s, -logdet, single)
    return _restore(x * s + b, logdet, single)


@dataclass
class LUFactors:
    """W = P·L·U with unit-lower L and upper U carrying the diagonal."""

    permutation: torch.Tensor
    lower: torch.Tensor
    upper: torch.Tensor

    def weight(self) -> torch.Tensor:
        return self.permutation @ self.lower @ self.upper


def inv_conv_1x1(x: torch.Tensor, factors: LUFactors, reverse: bool = False):
    """Invertible channel mixing by a learned 1×1 convolution in LU form."""
    x, single = _as_batch(x)
    diagonal = torch.diagonal(factors.upper)
    if bool((diagonal == 0).any()):
        raise InvertibilityError("1x1 mixing has a zero on the U diagonal")
    if diagonal.numel() != x.shape[1]:
        raise ShapeError(f"1x1 mixing has {diagonal.numel()} channels, input has {x.shape[1]}")
    batch, channels, height, width = x.shape
    logdet = (height * width * torch.log(torch.abs(diagonal)).sum()).expand(batch)

    if not reverse:
        y = F.conv2d(x, factors.weight()[:, :, None, None])
        return _restore(y, logdet, single)

    columns = x.permute(1, 0, 2, 3).reshape(channels, -1)
    columns = factors.permutation.transpose(0, 1) @ columns
    columns = torch.linalg.solve_triangular(factors.lower, columns, upper=False, unitriangular=True)
    columns = torch.linalg.solve_triangular(factors.upper, columns, upper=True)
    y = columns.reshape(channels, batch, height, width).permute(1, 0, 2, 3)
    return _restore(y, -logdet, single)


def affine_coupling(
    x: torch.Tensor,
    subnet: Callable[[torch.Tensor], torch.Tensor],
    clamp: float,
    reverse: bool = False,
):
    """
    Scale and shift the second channel half by functions of the first.

    The subnet maps C/2 channels to C, read as (raw_s, t); the scale is
    softly clamped to exp(±clamp) through tanh.
    """
    x, single = _as_batch(x)
    channels = x.shape[1]
    if channels % 2:
        raise ShapeError(f"affine coupling needs an even channel count, got {channels}")
    x_a, x_b = x[:, : channels // 2], x[:, channels // 2 :]
    raw_s, shift = subnet(x_a).chunk(2, dim=1)
    log_scale = clamp * torch.tanh(raw_s)
    logdet = log_scale.sum(dim=(1, 2, 3))

    if reverse:
        y_b = (x_b - shift) * torch.exp(-log_scale)
        return _restore(torch.cat([x_a, y_b], dim=1), -logdet, single)
    y_b = x_b * torch.exp(log_scale) + shift
    return _restore(torch.cat([x_a, y_b], dim=1), logdet, single)


def invertible_upsample(x: torch.Tensor, reverse: bool = False) -> torch.Tensor:
    """
    Trade groups of four channels for 2×2 pixel blocks (volume preserving).

    Output channel k at (2i+r, 2j+c) reads input channel 4k + 2r + c at (i, j).
    """
    x, single = _as_batch(x)
    if reverse:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"cannot downsample an odd {x.shape[2]}x{x.shape[3]} grid")
        y = F.pixel_unshuffle(x, 2)
    else:
        if x.shape[1] % 4:
            raise ShapeError(f"invertible upsampling needs channels divisible by 4, got {x.shape[1]}")
        y = F.pixel_shuffle(x, 2)
    return y[0] if single else y


class ActNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.pending_init = False

    @torch.no_grad()
    def initialize(self, x: torch.Tensor) -> None:
        """Set s, b so the output over ``x`` has zero mean and unit variance per channel."""
        mean = x.mean(dim=(0, 2, 3))
        std = x.std(dim=(0, 2, 3), unbiased=False).clamp_min(ACTNORM_STD_FLOOR)
        self.scale.copy_(1.0 / std)
        self.bias.copy_(-mean / std)

    def forward(self, x: torch.Tensor, reverse: bool = False):
        if self.pending_init and not reverse:
            self.initialize(x)
            self.pending_init = False
        return actnorm(x, self.scale, self.bias, reverse)


def random_rotation(channels: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform orthogonal matrix with determinant +1."""
    q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class InvertibleConv1x1(nn.Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        p, lower, upper = scipy.linalg.lu(random_rotation(channels, rng))
        diag = np.diag(upper)
        mask = np.tril(np.ones((channels, channels)), -1)

        self.register_buffer("permutation", torch.tensor(p, dtype=torch.float32))
        self.register_buffer("sign_s", torch.tensor(np.sign(diag), dtype=torch.float32))
        self.register_buffer("lower_mask", torch.tensor(mask, dtype=torch.float32))
        self.lower = nn.Parameter(torch.tensor(np.tril(lower, -1), dtype=torch.float32))
        self.upper = nn.Parameter(torch.tensor(np.triu(upper, 1), dtype=torch.float32))
        self.log_s = nn.Parameter(torch.tensor(np.log(np.abs(diag)), dtype=torch.float32))

    def factors(self) -> LUFactors:
        eye = torch.eye(self.log_s.numel(), dtype=self.log_s.dtype, device=self.log_s.device)
        return LUFactors(
            permutation=self.permutation,
            lower=self.lower * self.lower_mask + eye,
            upper=self.upper * self.lower_mask.transpose(0, 1) + torch.diag(self.sign_s * torch.exp(self.log_s)),
        )

    def forward(self, x: torch.Tensor, reverse: bool = False):
        return inv_conv_1x1(x, self.factors(), reverse)


class AffineCoupling(nn.Module):
    def __init__(self, channels: int, kernel_size: int, clamp: float):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"affine coupling needs an even channel count, got {channels}")
        padding = kernel_size // 2
        self.clamp = clamp
        self.subnet = nn.Sequential(
            nn.Conv2d(channels // 2, channels, kernel_size, padding=padding),
            nn.ReLU(),
            nn.Conv2d(channels, channels, kernel_size, padding=padding),
        )
        # Zero output conv: the step starts as the identity map.
        nn.init.zeros_(self.subnet[-1].weight)
        nn.init.zeros_(self.subnet[-1].bias)

    def forward(self, x: torch.Tensor, reverse: bool = False):
        return affine_coupling(x, self.subnet, self.clamp, reverse)


class FlowStep(nn.Module):
    """ActNorm, 1×1 mixing, affine coupling."""

    def __init__(self, channels: int, kernel_size: int, clamp: float, rng: np.random.Generator):
        super().__init__()
        self.actnorm = ActNorm(channels)
        self.mixing = InvertibleConv1x1(channels, rng)
        self.coupling = AffineCoupling(channels, kernel_size, clamp)

    def forward(self, x: torch.Tensor, reverse: bool = False):
        layers = (self.actnorm, self.mixing, self.coupling)
        logdet = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        for layer in reversed(layers) if reverse else layers:
            x, layer_logdet = layer(x, reverse=reverse)
            logdet = logdet + layer_logdet
        return x, logdet


class FlowStage(nn.Module):
    """Flow steps at one scale; subnet kernels alternate 1×1, 3×3, ..."""

    def __init__(self, channels: int, steps: int, clamp: float, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.steps = nn.ModuleList(
            FlowStep(channels, 1 if index % 2 == 0 else 3, clamp, rng) for index in range(steps)
        )

    def forward(self, x: torch.Tensor, reverse: bool = False):
        logdet = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        for step in reversed(self.steps) if reverse else self.steps:
            x, step_logdet = step(x, reverse=reverse)
            logdet = logdet + step_logdet
        return x, logdet

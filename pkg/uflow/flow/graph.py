"""
The U-shaped flow graph: one flow stage per scale, wired coarse to fine.

After each non-finest stage the first half of the output channels leaves the
graph as that scale's latent, the second half is upsampled invertibly and
appended after the next finer scale's feature channels. The finest stage's
output is emitted whole.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from uflow.features import FeaturePyramid
from uflow.flow.layers import ActNorm, FlowStage, invertible_upsample
from uflow.shared.errors import ParameterError, ShapeError

DEFAULT_STEPS_PER_STAGE = 4
DEFAULT_CLAMP = 2.0

logger = logging.getLogger("uflow.flow")


def stage_channels(feature_channels: Sequence[int]) -> list[int]:
    """Stage input widths D_l: D_L = C_L and D_l = C_l + D_{l+1}/8 for finer stages."""
    if not feature_channels:
        raise ShapeError("a flow graph needs at least one scale")
    levels = len(feature_channels)
    widths = [0] * levels
    for level in reversed(range(levels)):
        carried = 0
        if level + 1 < levels:
            carried = widths[level + 1] // 8
        widths[level] = feature_channels[level] + carried
        if widths[level] % 2:
            raise ShapeError(f"stage {level + 1} input has {widths[level]} channels, must be even")
        if level > 0 and widths[level] % 8:
            raise ShapeError(
                f"stage {level + 1} input has {widths[level]} channels, must be divisible by 8"
            )
    return widths


@dataclass
class LatentPyramid:
    """Latents z¹…z^L (finest first) and the total log|det J| of the graph."""

    z: list[np.ndarray]
    logdet: float

    @property
    def dimension(self) -> int:
        return sum(level.size for level in self.z)

    @property
    def channels(self) -> list[int]:
        return [level.shape[0] for level in self.z]


class UFlowGraph(nn.Module):
    def __init__(
        self,
        feature_channels: Sequence[int],
        steps_per_stage: int = DEFAULT_STEPS_PER_STAGE,
        clamp: float = DEFAULT_CLAMP,
        seed: int = 0,
    ):
        super().__init__()
        if steps_per_stage < 1:
            raise ParameterError(f"steps_per_stage must be positive, got {steps_per_stage}")
        if clamp <= 0:
            raise ParameterError(f"clamp must be positive, got {clamp}")
        self.feature_channels = list(feature_channels)
        self.stage_widths = stage_channels(self.feature_channels)
        self.steps_per_stage = steps_per_stage
        self.clamp = float(clamp)
        self.seed = seed

        rng = np.random.default_rng(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.stages = nn.ModuleList(
                FlowStage(width, steps_per_stage, self.clamp, rng) for width in self.stage_widths
            )
        self.register_buffer("actnorm_initialized", torch.zeros(()))

    @property
    def levels(self) -> int:
        return len(self.feature_channels)

    @property
    def latent_channels(self) -> list[int]:
        return [self.stage_widths[0]] + [width // 2 for width in self.stage_widths[1:]]

    @property
    def is_initialized(self) -> bool:
        return bool(self.actnorm_initialized.item())

    @property
    def dtype(self) -> torch.dtype:
        return self.actnorm_initialized.dtype

    def actnorms(self) -> list[ActNorm]:
        """ActNorm layers in the order the forward pass meets them."""
        ordered = []
        for stage in reversed(self.stages):
            ordered.extend(step.actnorm for step in stage.steps)
        return ordered

    def latent_shapes(self, finest: tuple[int, int]) -> list[tuple[int, int, int]]:
        height, width = finest
        return [
            (channels, height // 2**level, width // 2**level)
            for level, channels in enumerate(self.latent_channels)
        ]

    def _check_features(self, xs: Sequence[torch.Tensor]) -> None:
        if len(xs) != self.levels:
            raise ShapeError(f"graph has {self.levels} stages, got {len(xs)} feature levels")
        for level, x in enumerate(xs):
            if x.dim() != 4 or x.shape[1] != self.feature_channels[level]:
                raise ShapeError(
                    f"stage {level + 1} expects {self.feature_channels[level]} feature channels, "
                    f"got shape {tuple(x.shape)}"
                )
            if level > 0 and tuple(xs[level - 1].shape[2:]) != (2 * x.shape[2], 2 * x.shape[3]):
                raise ShapeError(f"stage {level + 1} grid does not halve stage {level}")

    def _check_latents(self, zs: Sequence[torch.Tensor]) -> None:
        if len(zs) != self.levels:
            raise ShapeError(f"graph has {self.levels} stages, got {len(zs)} latent levels")
        for level, z in enumerate(zs):
            if z.dim() != 4 or z.shape[1] != self.latent_channels[level]:
                raise ShapeError(
                    f"stage {level + 1} emits {self.latent_channels[level]} latent channels, "
                    f"got shape {tuple(z.shape)}"
                )
            if level > 0 and tuple(zs[level - 1].shape[2:]) != (2 * z.shape[2], 2 * z.shape[3]):
                raise ShapeError(f"stage {level + 1} latent grid does not halve stage {level}")

    def forward(self, xs: Sequence[torch.Tensor]) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Map batched feature levels (finest first) to latents and per-sample logdet."""
        self._check_features(xs)
        zs: list[torch.Tensor] = [None] * self.levels
        logdet = torch.zeros(xs[0].shape[0], dtype=xs[0].dtype, device=xs[0].device)
        carry = None
        for level in reversed(range(self.levels)):
            h = xs[level] if carry is None else torch.cat([xs[level], carry], dim=1)
            h, stage_logdet = self.stages[level](h)
            logdet = logdet + stage_logdet
            if level == 0:
                zs[0] = h
            else:
                half = h.shape[1] // 2
                zs[level] = h[:, :half]
                carry = invertible_upsample(h[:, half:])
        return zs, logdet

    def inverse(self, zs: Sequence[torch.Tensor]) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Map latents back to feature levels; logdet is that of the inverse map."""
        self._check_latents(zs)
        xs: list[torch.Tensor] = [None] * self.levels
        logdet = torch.zeros(zs[0].shape[0], dtype=zs[0].dtype, device=zs[0].device)
        carry = None
        for level in range(self.levels):
            h = zs[0] if carry is None else torch.cat([zs[level], invertible_upsample(carry, reverse=True)], dim=1)
            h, stage_logdet = self.stages[level](h, reverse=True)
            logdet = logdet + stage_logdet
            channels = self.feature_channels[level]
            xs[level] = h[:, :channels]
            carry = h[:, channels:]
        return xs, logdet


def build_graph(
    feature_channels: Sequence[int],
    steps_per_stage: int = DEFAULT_STEPS_PER_STAGE,
    clamp: float = DEFAULT_CLAMP,
    seed: int = 0,
) -> UFlowGraph:
    graph = UFlowGraph(feature_channels, steps_per_stage, clamp, seed)
    logger.info(
        "Built flow graph: %d stages x %d steps, stage widths %s, %d parameters",
        graph.levels,
        steps_per_stage,
        graph.stage_widths,
        sum(p.numel() for p in graph.parameters()),
    )
    return graph


def _to_batch(volumes: Sequence[np.ndarray], dtype: torch.dtype) -> list[torch.Tensor]:
    return [torch.as_tensor(np.asarray(v)).to(dtype).unsqueeze(0) for v in volumes]


def uflow_forward(graph: UFlowGraph, features: FeaturePyramid) -> LatentPyramid:
    with torch.no_grad():
        zs, logdet = graph(_to_batch(features.levels, graph.dtype))
    return LatentPyramid(z=[z[0].numpy() for z in zs], logdet=float(logdet[0]))


def uflow_inverse(graph: UFlowGraph, latents: LatentPyramid) -> FeaturePyramid:
    with torch.no_grad():
        xs, _ = graph.inverse(_to_batch(latents.z, graph.dtype))
    return FeaturePyramid([x[0].numpy() for x in xs])


def uflow_sample(graph: UFlowGraph, finest: tuple[int, int], seed: int = 0) -> FeaturePyramid:
    """Push a standard normal latent draw through the inverse graph."""
    rng = np.random.default_rng(seed)
    height, width = finest
    if height % 2 ** (graph.levels - 1) or width % 2 ** (graph.levels - 1):
        raise ShapeError(f"{height}x{width} cannot be halved {graph.levels - 1} times")
    zs = [rng.standard_normal(shape) for shape in graph.latent_shapes(finest)]
    return uflow_inverse(graph, LatentPyramid(z=zs, logdet=math.nan))

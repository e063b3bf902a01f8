"""
A contrario detection on whitened latents.

Under the background model every squared latent entry is χ²(1). A voxel is a
candidate when its square exceeds the p-quantile τ; per pixel and scale, the
number of candidates in a w×w block (averaged over channels) is tested
against Binomial(n, 1 − p). Per-scale log tails are upsampled to the finest
grid and summed, and ln N_T is added to turn the joint probability into a
number of false alarms. Pixels with log NFA < 0 are detections.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field, field_validator

from uflow.flow.graph import LatentPyramid
from uflow.numerics import block_counts, chi2_quantile, log_binomial_tail
from uflow.scoring import upsample_bilinear
from uflow.shared.errors import ParameterError, ShapeError

logger = logging.getLogger("uflow.nfa")


class NfaConfig(BaseModel):
    p: float = Field(default=0.9, gt=0, lt=1)
    # Block size per scale, finest first; the last entry repeats for deeper scales.
    windows: list[int] = Field(default_factory=lambda: [5, 3], min_length=1)
    high_precision: bool = False
    threshold: float = 0.0

    @field_validator("windows")
    @classmethod
    def windows_odd(cls, value: list[int]) -> list[int]:
        for w in value:
            if w < 1 or w % 2 == 0:
                raise ValueError(f"window sizes must be positive odd integers, got {w}")
        return value

    @property
    def tau(self) -> float:
        return chi2_quantile(self.p)

    def window_for(self, level: int) -> int:
        return self.windows[min(level, len(self.windows) - 1)]


@dataclass
class LogNfaMap:
    values: np.ndarray
    n_tests: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def candidate_mask(latents: LatentPyramid, tau: float) -> list[np.ndarray]:
    if tau < 0:
        raise ParameterError(f"tau must be non-negative, got {tau}")
    return [(np.square(np.asarray(z, dtype=np.float64)) > tau).astype(np.uint8) for z in latents.z]


def scale_log_tails(mask: np.ndarray, w: int, p: float, high_precision: bool = False) -> np.ndarray:
    """Log binomial tail of every pixel's channel-averaged block count at one scale."""
    channels = mask.shape[0]
    counts, sizes = block_counts(mask, w)
    area = sizes // channels
    # Few distinct (count, area) pairs occur on a grid; evaluate each once.
    pairs, inverse = np.unique(np.stack([counts.ravel(), area.ravel()], axis=1), axis=0, return_inverse=True)
    tails = log_binomial_tail(pairs[:, 0] / channels, pairs[:, 1].astype(np.float64), 1 - p, high_precision)
    return np.asarray(tails)[np.reshape(inverse, -1)].reshape(counts.shape)


def log_nfa_map(latents: LatentPyramid, config: NfaConfig) -> LogNfaMap:
    if not latents.z:
        raise ShapeError("latent pyramid is empty")
    finest = latents.z[0].shape[1:]
    n_tests = sum(z.shape[1] * z.shape[2] for z in latents.z)
    masks = candidate_mask(latents, config.tau)

    total = np.full(finest, math.log(n_tests), dtype=np.float64)
    for level, mask in enumerate(masks):
        w = config.window_for(level)
        _, height, width = mask.shape
        if w > 2 * min(height, width) - 1:
            raise ParameterError(f"window {w} exceeds the {height}x{width} grid of scale {level + 1}")
        tails = scale_log_tails(mask, w, config.p, config.high_precision)
        total += upsample_bilinear(tails, finest)
    logger.debug("log NFA over %d tests: %d pixels below 0", n_tests, int(np.count_nonzero(total < 0)))
    return LogNfaMap(values=total, n_tests=n_tests)


def auto_segment(nfa_map: LogNfaMap | np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Pixels whose log NFA falls below the threshold; 0 means NFA < 1."""
    values = nfa_map.values if isinstance(nfa_map, LogNfaMap) else nfa_map
    return np.asarray(values) < threshold


def nfa_image_score(nfa_map: LogNfaMap | np.ndarray) -> float:
    values = nfa_map.values if isinstance(nfa_map, LogNfaMap) else nfa_map
    return float(np.max(-np.asarray(values)))

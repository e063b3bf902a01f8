"""
Likelihood-based anomaly score maps on the finest latent grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel

from uflow.flow.graph import LatentPyramid
from uflow.shared.errors import ParameterError, ShapeError


class ScoreConfig(BaseModel):
    kind: Literal["as", "nfa"] = "nfa"
    # False replaces the nested ½·½ of the score exponent by a single ½.
    double_half: bool = True


@dataclass
class ScoreMap:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.size == 0:
            raise ShapeError(f"score map must be a non-empty 2-D raster, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("score map contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def upsample_bilinear(values, target: Sequence[int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-D map to a larger grid."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ShapeError(f"expected a non-empty 2-D map, got shape {values.shape}")
    height, width = (int(size) for size in target)
    if height < values.shape[0] or width < values.shape[1]:
        raise ParameterError(f"cannot upsample {values.shape} to the smaller grid {(height, width)}")
    if (height, width) == values.shape:
        return values.copy()
    out = F.interpolate(
        torch.from_numpy(values)[None, None],
        size=(height, width),
        mode="bilinear",
        align_corners=True,
    )
    return out[0, 0].numpy()


def likelihood_score_map(latents: LatentPyramid, double_half: bool = True) -> ScoreMap:
    """AS = -mean over scales of exp(-factor · channel-mean of z²), upsampled per scale."""
    if not latents.z:
        raise ShapeError("latent pyramid is empty")
    factor = 0.25 if double_half else 0.5
    finest = latents.z[0].shape[1:]
    total = np.zeros(finest, dtype=np.float64)
    for z in latents.z:
        z = np.asarray(z, dtype=np.float64)
        energy = np.exp(-factor * np.mean(z * z, axis=0))
        total += upsample_bilinear(energy, finest)
    # Floored so AS stays strictly negative once the exponentials underflow.
    return ScoreMap(-np.maximum(total / len(latents.z), np.finfo(np.float64).tiny))


def image_score(score_map: ScoreMap) -> float:
    return float(np.max(score_map.values))

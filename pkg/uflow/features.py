"""
Multi-scale feature pyramids: a deterministic patch-statistics extractor and
the UFV v1 binary container for importing features computed elsewhere.

UFV v1 layout (little-endian, no padding, no trailing bytes)::

    b"UFV1"                      magic
    u32 L                        number of levels
    L × (u32 C, u32 H, u32 W)    level shapes, finest first
    L × C·H·W float32            level data, channel-major then row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from uflow.numerics import as_volume
from uflow.shared.errors import ParseError, ShapeError

UFV_MAGIC = b"UFV1"
N_STAT_CHANNELS = 5

_CENTRAL_DIFF = np.array([-0.5, 0.0, 0.5])


@dataclass
class FeaturePyramid:
    """L feature volumes, finest first, each level half the size of the previous."""

    levels: list[np.ndarray]

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("a feature pyramid needs at least one level")
        self.levels = [as_volume(level, name=f"level {i}") for i, level in enumerate(self.levels)]
        for i in range(1, len(self.levels)):
            _, h_prev, w_prev = self.levels[i - 1].shape
            _, h, w = self.levels[i].shape
            if h_prev != 2 * h or w_prev != 2 * w:
                raise ShapeError(
                    f"level {i} is {h}x{w} but must halve level {i - 1} ({h_prev}x{w_prev})"
                )

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(level.shape) for level in self.levels]

    @property
    def channels(self) -> list[int]:
        return [level.shape[0] for level in self.levels]

    def __len__(self) -> int:
        return len(self.levels)


def to_grayscale(image) -> np.ndarray:
    """Return a 2-D float64 luminance image; RGB channels are averaged."""
    pixels = np.asarray(image, dtype=np.float64)
    if pixels.ndim == 3 and pixels.shape[-1] in (1, 3):
        pixels = pixels.mean(axis=-1)
    elif pixels.ndim == 3 and pixels.shape[0] in (1, 3):
        pixels = pixels.mean(axis=0)
    if pixels.ndim != 2:
        raise ShapeError(f"image must be H×W or H×W×3, got shape {np.shape(image)}")
    return pixels


def _box_downsample(pixels: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return pixels
    h, w = pixels.shape
    return pixels.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def _projection_filters(seed: int, level: int, count: int, patch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, level])
    return rng.standard_normal((count, patch, patch)) / patch


def _cell_features(pixels: np.ndarray, patch: int, channels: int, filters: np.ndarray) -> np.ndarray:
    h, w = pixels.shape
    cells = pixels.reshape(h // patch, patch, w // patch, patch)
    grad_x = np.abs(ndimage.correlate1d(pixels, _CENTRAL_DIFF, axis=1, mode="nearest"))
    grad_y = np.abs(ndimage.correlate1d(pixels, _CENTRAL_DIFF, axis=0, mode="nearest"))
    laplacian = np.abs(ndimage.laplace(pixels, mode="nearest"))

    def cell_mean(values: np.ndarray) -> np.ndarray:
        return values.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3))

    stats = [
        cells.mean(axis=(1, 3)),
        cells.std(axis=(1, 3)),
        cell_mean(grad_x),
        cell_mean(grad_y),
        cell_mean(laplacian),
    ]
    if channels <= N_STAT_CHANNELS:
        return np.stack(stats[:channels])
    projections = np.einsum("iajb,kab->kij", cells, filters)
    return np.concatenate([np.stack(stats), projections])


def _standardize(features: np.ndarray) -> np.ndarray:
    mean = features.mean(axis=(1, 2), keepdims=True)
    std = features.std(axis=(1, 2), keepdims=True)
    flat = std <= 1e-9 * (np.abs(mean) + 1.0)
    return np.where(flat, 0.0, (features - mean) / np.where(flat, 1.0, std))


def extract_multiscale(
    image,
    levels: int,
    patch: int,
    channels_per_level: list[int],
    seed: int = 0,
    standardize: bool = True,
) -> FeaturePyramid:
    """
    Compute an L-level pyramid of per-cell statistics.

    Level ``l`` reads the image box-downsampled by ``2**l`` and tokenized into
    patch×patch cells. Each cell yields its mean, standard deviation, mean
    absolute x/y gradients, mean absolute Laplacian and responses to
    fixed-seed random projection filters, truncated to the level's channel
    count. With ``standardize`` every channel is brought to zero mean and
    unit variance over the image (flat channels become zeros).
    """
    pixels = to_grayscale(image)
    if levels < 1 or patch < 1:
        raise ShapeError(f"levels and patch must be positive, got {levels} and {patch}")
    if len(channels_per_level) != levels:
        raise ShapeError(f"expected {levels} channel counts, got {len(channels_per_level)}")
    h, w = pixels.shape
    unit = patch * 2 ** (levels - 1)
    if h % unit or w % unit:
        raise ShapeError(f"image {h}x{w} is not divisible by patch·2^(L-1) = {unit}")

    volumes = []
    for level, channels in enumerate(channels_per_level):
        filters = _projection_filters(seed, level, max(channels - N_STAT_CHANNELS, 0), patch)
        features = _cell_features(_box_downsample(pixels, 2**level), patch, channels, filters)
        if standardize:
            features = _standardize(features)
        volumes.append(features.astype(np.float32))
    return FeaturePyramid(volumes)


def write_ufv(pyramid: FeaturePyramid, path) -> None:
    header = [UFV_MAGIC, struct.pack("<I", len(pyramid))]
    header += [struct.pack("<III", *shape) for shape in pyramid.shapes]
    payload = [np.ascontiguousarray(level, dtype="<f4").tobytes() for level in pyramid.levels]
    Path(path).write_bytes(b"".join(header + payload))


def read_ufv(path) -> FeaturePyramid:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ParseError("truncated header", field="magic")
    if data[:4] != UFV_MAGIC:
        raise ParseError("bad magic", field="magic")
    (n_levels,) = struct.unpack_from("<I", data, 4)
    if n_levels < 1:
        raise ParseError("pyramid must have at least one level", field="L")

    offset = 8
    shapes = []
    for level in range(n_levels):
        if offset + 12 > len(data):
            raise ParseError("truncated header", field=f"level {level} shape")
        shape = struct.unpack_from("<III", data, offset)
        if min(shape) < 1:
            raise ParseError(f"empty dimension in {shape}", field=f"level {level} shape")
        shapes.append(shape)
        offset += 12

    volumes = []
    for level, shape in enumerate(shapes):
        count = shape[0] * shape[1] * shape[2]
        if offset + 4 * count > len(data):
            raise ParseError("truncated payload", field=f"level {level} data")
        values = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        volumes.append(values.reshape(shape).astype(np.float32))
        offset += 4 * count
    if offset != len(data):
        raise ParseError(f"{len(data) - offset} trailing bytes", field="payload")

    try:
        return FeaturePyramid(volumes)
    except ShapeError as exc:
        raise ParseError(str(exc), field="shape") from exc

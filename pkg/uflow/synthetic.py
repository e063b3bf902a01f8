"""
Deterministic toy datasets: anomaly-free textures and defect-injected test
images with pixel ground truth.

Every image draws from its own generator seeded with ``seed ^ index``, where
the index runs over train images first, then normal and anomalous test images.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy import ndimage

from uflow.shared import rasters
from uflow.shared.errors import ArtifactError, ParameterError

MAX_DEFECT_ATTEMPTS = 100
MANIFEST_NAME = "manifest.csv"

TextureKind = Literal["gaussian_field", "grating", "checker"]
DefectKind = Literal["blob", "scratch", "patch"]

logger = logging.getLogger("uflow.synthetic")


class SynthConfig(BaseModel):
    image_size: tuple[int, int] = (64, 64)
    n_train: int = Field(default=200, ge=0)
    n_test_normal: int = Field(default=50, ge=0)
    n_test_anomalous: int = Field(default=50, ge=0)
    texture: TextureKind = "gaussian_field"
    defects: list[DefectKind] = Field(default_factory=lambda: ["blob"], min_length=1)
    contrast: float = Field(default=0.8, gt=0)
    # Smallest and largest defect extent in pixels.
    defect_size: tuple[int, int] = (6, 16)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @field_validator("image_size")
    @classmethod
    def positive_size(cls, value: tuple[int, int]) -> tuple[int, int]:
        if min(value) < 1:
            raise ValueError(f"image size must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def ordered_defect_size(self) -> "SynthConfig":
        low, high = self.defect_size
        if not 1 <= low <= high:
            raise ValueError(f"defect_size must satisfy 1 <= min <= max, got {self.defect_size}")
        return self


@dataclass
class SyntheticDataset:
    train: list[np.ndarray] = field(default_factory=list)
    test: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)


# --- textures ---
def render_texture(kind: str, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    height, width = shape
    if kind == "gaussian_field":
        noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=2.0, mode="wrap")
        noise /= max(float(noise.std()), 1e-12)
        return 0.5 + 0.25 * np.tanh(noise)
    if kind == "grating":
        angle = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2 * math.pi)
        rows, cols = np.mgrid[0:height, 0:width]
        along = cols * math.cos(angle) + rows * math.sin(angle)
        return 0.5 + 0.2 * np.sin(2 * math.pi * along / 8.0 + phase) + 0.02 * rng.standard_normal(shape)
    if kind == "checker":
        tile = 8
        offset_r, offset_c = rng.integers(0, tile, size=2)
        rows, cols = np.mgrid[0:height, 0:width]
        tile_r, tile_c = (rows + offset_r) // tile, (cols + offset_c) // tile
        jitter = rng.normal(0.0, 0.03, size=(tile_r.max() + 1, tile_c.max() + 1))
        base = np.where((tile_r + tile_c) % 2 == 0, 0.35, 0.65)
        return base + jitter[tile_r, tile_c]
    raise ParameterError(f"unknown texture kind {kind!r}")


# --- defects ---
def _defect_profile(
    kind: str,
    shape: tuple[int, int],
    size: tuple[int, int],
    rng: np.random.Generator,
) -> np.ndarray:
    """Defect intensity profile in [0, 1], centered so the defect stays inside the image."""
    height, width = shape
    low, high = size
    margin = high / 2.0
    center_r = rng.uniform(margin, height - margin)
    center_c = rng.uniform(margin, width - margin)
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    dr, dc = rows - center_r, cols - center_c
    angle = rng.uniform(0.0, math.pi)
    cos, sin = math.cos(angle), math.sin(angle)
    along = dc * cos + dr * sin
    across = -dc * sin + dr * cos

    if kind == "blob":
        a, b = rng.uniform(low / 2.0, high / 2.0, size=2)
        return ((along / a) ** 2 + (across / b) ** 2 <= 1.0).astype(np.float64)
    if kind == "scratch":
        half_length = rng.uniform(low / 2.0, high / 2.0)
        half_width = rng.uniform(0.5, 1.5)
        distance = np.hypot(np.maximum(np.abs(along) - half_length, 0.0), across)
        return np.clip(half_width + 0.5 - distance, 0.0, 1.0)
    if kind == "patch":
        half_h, half_w = rng.uniform(low / 2.0, high / 2.0, size=2)
        inside = (np.abs(dr) <= half_h) & (np.abs(dc) <= half_w)
        texture = render_texture("gaussian_field", shape, rng)
        return inside * (0.5 + (texture - texture.min()) / max(np.ptp(texture), 1e-12) * 0.5)
    raise ParameterError(f"unknown defect kind {kind!r}")


def inject_defect(
    image: np.ndarray,
    kind: str,
    contrast: float,
    size: tuple[int, int],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Composite one additive defect; returns the image and its ground-truth mask."""
    if size[1] > min(image.shape):
        raise ParameterError(f"defect size {size[1]} exceeds the {image.shape[0]}x{image.shape[1]} image")
    for _ in range(MAX_DEFECT_ATTEMPTS):
        profile = _defect_profile(kind, image.shape, size, rng)
        weight = profile.sum()
        if weight == 0:
            continue
        # Push toward the far side of mid-gray so clipping keeps most of the contrast.
        sign = 1.0 if float((image * profile).sum() / weight) < 0.5 else -1.0
        composite = np.clip(image + sign * contrast * profile, 0.0, 1.0)
        mask = np.abs(composite - image) > contrast / 4.0
        if mask.any():
            return composite, mask
    raise ParameterError(f"could not place a visible {kind} defect at contrast {contrast}")


def gen_dataset(config: SynthConfig) -> SyntheticDataset:
    shape = tuple(config.image_size)
    if config.n_test_anomalous and config.defect_size[1] > min(shape):
        raise ParameterError(f"defect size {config.defect_size[1]} exceeds the {shape[0]}x{shape[1]} image")

    def normal(index: int) -> tuple[np.ndarray, np.random.Generator]:
        rng = np.random.default_rng(config.seed ^ index)
        return np.clip(render_texture(config.texture, shape, rng), 0.0, 1.0), rng

    dataset = SyntheticDataset()
    index = 0
    for _ in range(config.n_train):
        dataset.train.append(normal(index)[0])
        index += 1
    for _ in range(config.n_test_normal):
        dataset.test.append(normal(index)[0])
        dataset.masks.append(np.zeros(shape, dtype=bool))
        dataset.labels.append(0)
        index += 1
    for _ in range(config.n_test_anomalous):
        image, rng = normal(index)
        kind = config.defects[int(rng.integers(len(config.defects)))]
        image, mask = inject_defect(image, kind, config.contrast, config.defect_size, rng)
        dataset.test.append(image)
        dataset.masks.append(mask)
        dataset.labels.append(1)
        index += 1
    logger.info(
        "Generated %d train and %d test images (%s texture)",
        len(dataset.train),
        len(dataset.test),
        config.texture,
    )
    return dataset


# --- files ---
@dataclass
class ManifestEntry:
    path: str
    split: str
    label: int
    mask: str = ""

    @property
    def name(self) -> str:
        return Path(self.path).stem


def write_dataset(dataset: SyntheticDataset, directory) -> list[ManifestEntry]:
    """8-bit PGM images, 0/255 PGM masks and ``manifest.csv`` under ``directory``."""
    directory = Path(directory)
    for sub in ("train", "test", "ground_truth"):
        (directory / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    for index, image in enumerate(dataset.train):
        path = f"train/train_{index:04d}.pgm"
        rasters.write_image(directory / path, image)
        entries.append(ManifestEntry(path=path, split="train", label=0))
    for index, (image, mask, label) in enumerate(zip(dataset.test, dataset.masks, dataset.labels)):
        path = f"test/test_{index:04d}.pgm"
        mask_path = f"ground_truth/test_{index:04d}_mask.pgm"
        rasters.write_image(directory / path, image)
        rasters.write_mask(directory / mask_path, mask)
        entries.append(ManifestEntry(path=path, split="test", label=label, mask=mask_path))

    with (directory / MANIFEST_NAME).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["path", "split", "label", "mask"])
        for entry in entries:
            writer.writerow([entry.path, entry.split, entry.label, entry.mask])
    return entries


def read_manifest(directory) -> list[ManifestEntry]:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise ArtifactError(f"missing dataset manifest {path}")
    with path.open(newline="") as handle:
        return [
            ManifestEntry(path=row["path"], split=row["split"], label=int(row["label"]), mask=row.get("mask") or "")
            for row in csv.DictReader(handle)
        ]

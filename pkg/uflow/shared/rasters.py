"""
Raster files: 8-bit PGM/PNG images and masks through Pillow, PFM float maps
and 16-bit PGM previews with an affine-scale sidecar.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from uflow.shared.errors import ArtifactError, ParseError, ShapeError


def _require(path: Path) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing file {path}")
    return path


def _check_2d(array: np.ndarray, name: str) -> np.ndarray:
    if array.ndim != 2 or min(array.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D raster, got shape {array.shape}")
    return array


# --- 8-bit images and masks ---
def write_image(path, pixels) -> None:
    """Write a [0, 1] grayscale image as 8-bit (format from the suffix)."""
    pixels = _check_2d(np.asarray(pixels, dtype=np.float64), "image")
    quantized = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized).save(Path(path))


def read_image(path) -> np.ndarray:
    with Image.open(_require(Path(path))) as image:
        return np.asarray(image.convert("L"), dtype=np.float64) / 255.0


def write_mask(path, mask) -> None:
    """0 = normal, 255 = anomalous."""
    mask = _check_2d(np.asarray(mask, dtype=bool), "mask")
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(Path(path))


def read_mask(path) -> np.ndarray:
    with Image.open(_require(Path(path))) as image:
        return np.asarray(image.convert("L")) > 127


def image_size(path) -> tuple[int, int]:
    with Image.open(_require(Path(path))) as image:
        width, height = image.size
    return height, width


# --- float maps ---
def write_pfm(path, values) -> None:
    """Grayscale PFM, little-endian, rows stored bottom to top."""
    values = _check_2d(np.asarray(values, dtype=np.float64), "map")
    height, width = values.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(values[::-1], dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_pfm(path) -> np.ndarray:
    data = _require(Path(path)).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"Pf":
        raise ParseError("bad magic", field="pfm header")
    try:
        width, height = (int(token) for token in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise ParseError("malformed header", field="pfm header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    if len(parts[3]) != 4 * width * height:
        raise ParseError("truncated payload", field="pfm data")
    values = np.frombuffer(parts[3], dtype=dtype).reshape(height, width)
    return values[::-1].astype(np.float32)


def write_preview(path, values) -> Path:
    """
    Affinely rescale a map to 16-bit PGM; returns the sidecar path.

    The sidecar holds ``offset`` and ``scale`` with value = offset + scale·pixel.
    """
    values = _check_2d(np.asarray(values, dtype=np.float64), "map")
    low, high = float(values.min()), float(values.max())
    scale = (high - low) / 65535.0 if high > low else 1.0
    pixels = np.rint((values - low) / scale).astype(">u2")
    height, width = values.shape
    path = Path(path)
    path.write_bytes(f"P5\n{width} {height}\n65535\n".encode("ascii") + pixels.tobytes())
    sidecar = path.with_suffix(".scale.txt")
    sidecar.write_text(f"offset {low!r}\nscale {scale!r}\n")
    return sidecar

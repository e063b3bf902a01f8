import importlib
import sys
from pathlib import Path

import numpy as np
import torch

from uflow.features import FeaturePyramid
from uflow.flow.graph import LatentPyramid, UFlowGraph


def reload_module(module_name: str):
    """Import a module fresh so env overrides take effect."""
    if module_name in sys.modules:
        del sys.modules[module_name]
    return importlib.import_module(module_name)


def write_config(path: Path, sections: dict[str, dict]) -> Path:
    """Write an INI run config; values are written with str()."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in values.items())
        lines.append("")
    path.write_text("\n".join(lines))
    return path


def random_pyramid(channels, finest, seed=0, scale=1.0) -> FeaturePyramid:
    rng = np.random.default_rng(seed)
    height, width = finest
    return FeaturePyramid(
        [
            (scale * rng.standard_normal((c, height // 2**level, width // 2**level))).astype(np.float32)
            for level, c in enumerate(channels)
        ]
    )


def random_latents(channels, finest, seed=0, scale=1.0) -> LatentPyramid:
    pyramid = random_pyramid(channels, finest, seed, scale)
    return LatentPyramid(z=[level.astype(np.float64) for level in pyramid.levels], logdet=0.0)


def randomize_graph(graph: UFlowGraph, seed=0, std=0.1) -> UFlowGraph:
    """Perturb every parameter so no layer sits at its identity initialization."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for parameter in graph.parameters():
            parameter.add_(std * torch.randn(parameter.shape, generator=generator, dtype=parameter.dtype))
    return graph


def zero_couplings(graph: UFlowGraph) -> UFlowGraph:
    with torch.no_grad():
        for stage in graph.stages:
            for step in stage.steps:
                for parameter in step.coupling.parameters():
                    parameter.zero_()
    return graph


def identity_graph(channels, steps=2) -> UFlowGraph:
    """Graph whose every step is the identity: zero couplings, unit LU mixing."""
    graph = zero_couplings(UFlowGraph(channels, steps_per_stage=steps))
    with torch.no_grad():
        for stage in graph.stages:
            for step in stage.steps:
                mixing = step.mixing
                mixing.permutation.copy_(torch.eye(mixing.permutation.shape[0]))
                mixing.sign_s.fill_(1.0)
                mixing.lower.zero_()
                mixing.upper.zero_()
                mixing.log_s.zero_()
    return graph


def brute_upsample(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation, one output pixel at a time."""
    h, w = values.shape
    out = np.empty((height, width))
    for i in range(height):
        for j in range(width):
            y = i * (h - 1) / (height - 1) if height > 1 else 0.0
            x = j * (w - 1) / (width - 1) if width > 1 else 0.0
            y0, x0 = min(int(y), h - 1), min(int(x), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = (
                values[y0, x0] * (1 - dy) * (1 - dx)
                + values[y0, x1] * (1 - dy) * dx
                + values[y1, x0] * dy * (1 - dx)
                + values[y1, x1] * dy * dx
            )
    return out

"""
UFM1 model checkpoints.

Layout (little-endian)::

    b"UFM1"
    u32 version                  currently 1
    u32 L, u32 steps_per_stage
    f64 clamp
    u64 seed
    L × u32 C_l                  feature channels, finest first
    u32 n_arrays
    n_arrays × (u32 ndim, ndim × u32 dims, prod(dims) × float32)

Arrays follow the graph's ``state_dict`` declaration order (parameters and
buffers; the graph-level ActNorm-initialized flag comes first).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from uflow.flow.graph import UFlowGraph
from uflow.shared.errors import ParseError, ShapeError

UFM_MAGIC = b"UFM1"
UFM_VERSION = 1


def save_checkpoint(graph: UFlowGraph, path) -> None:
    chunks = [
        UFM_MAGIC,
        struct.pack("<III", UFM_VERSION, graph.levels, graph.steps_per_stage),
        struct.pack("<dQ", graph.clamp, graph.seed),
        struct.pack(f"<{graph.levels}I", *graph.feature_channels),
    ]
    state = graph.state_dict()
    chunks.append(struct.pack("<I", len(state)))
    for tensor in state.values():
        array = tensor.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str, field: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise ParseError("truncated checkpoint", field=field)
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def floats(self, count: int, field: str) -> np.ndarray:
        if self.offset + 4 * count > len(self.data):
            raise ParseError("truncated checkpoint", field=field)
        values = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.offset)
        self.offset += 4 * count
        return values


def load_checkpoint(path) -> UFlowGraph:
    path = Path(path)
    reader = _Reader(path.read_bytes())
    (magic,) = reader.unpack("<4s", "magic")
    if magic != UFM_MAGIC:
        raise ParseError("bad magic", field="magic")
    version, levels, steps = reader.unpack("<III", "header")
    if version != UFM_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", field="version")
    clamp, seed = reader.unpack("<dQ", "header")
    channels = list(reader.unpack(f"<{levels}I", "feature channels"))

    try:
        graph = UFlowGraph(channels, steps_per_stage=steps, clamp=clamp, seed=seed)
    except ShapeError as exc:
        raise ParseError(str(exc), field="feature channels") from exc

    state = graph.state_dict()
    (n_arrays,) = reader.unpack("<I", "array count")
    if n_arrays != len(state):
        raise ParseError(f"expected {len(state)} arrays, found {n_arrays}", field="array count")

    loaded = {}
    for name, reference in state.items():
        (ndim,) = reader.unpack("<I", name)
        shape = reader.unpack(f"<{ndim}I", name)
        if tuple(shape) != tuple(reference.shape):
            raise ParseError(f"shape {shape} does not match {tuple(reference.shape)}", field=name)
        values = reader.floats(int(np.prod(shape, dtype=np.int64)), name)
        loaded[name] = torch.from_numpy(values.reshape(shape).astype(np.float32))
    if reader.offset != len(reader.data):
        raise ParseError("trailing bytes after the last array", field="payload")

    graph.load_state_dict(loaded)
    return graph

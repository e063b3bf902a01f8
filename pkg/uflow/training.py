"""
Exact maximum-likelihood training of the flow graph on anomaly-free pyramids.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from pydantic import BaseModel, Field

from uflow.features import FeaturePyramid
from uflow.flow.graph import LatentPyramid, UFlowGraph
from uflow.shared.errors import NumericError, ParameterError, ShapeError, TrainingError

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
USUAL_LR_RANGE = (3e-5, 3e-3)

logger = logging.getLogger("uflow.training")


class TrainConfig(BaseModel):
    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=30, ge=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    gradient_clip_norm: float = Field(default=1.0, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)


@dataclass
class TrainResult:
    graph: UFlowGraph
    history: list[float] = field(default_factory=list)
    initial_nll: float = math.nan


# --- likelihood ---
def negative_log_likelihood(zs: Sequence[torch.Tensor], logdet: torch.Tensor) -> torch.Tensor:
    """Per-sample NLL in nats per latent dimension."""
    dimension = sum(z[0].numel() for z in zs)
    energy = sum(0.5 * z.pow(2).flatten(1).sum(dim=1) for z in zs)
    return (energy - logdet) / dimension + HALF_LOG_2PI


def nll_loss(latents: LatentPyramid) -> float:
    if not all(np.all(np.isfinite(z)) for z in latents.z) or not math.isfinite(latents.logdet):
        raise NumericError("non-finite latents", layer="nll_loss")
    zs = [torch.from_numpy(np.asarray(z, dtype=np.float64))[None] for z in latents.z]
    return float(negative_log_likelihood(zs, torch.tensor([latents.logdet], dtype=torch.float64))[0])


def log_likelihood(graph: UFlowGraph, pyramid: FeaturePyramid) -> float:
    """Total log-density of one pyramid under the trained flow, in nats."""
    with torch.no_grad():
        zs, logdet = graph(stack_pyramids([pyramid], graph.dtype))
        dimension = sum(z[0].numel() for z in zs)
        return float(-negative_log_likelihood(zs, logdet)[0] * dimension)


# --- batching ---
def stack_pyramids(pyramids: Sequence[FeaturePyramid], dtype: torch.dtype = torch.float32) -> list[torch.Tensor]:
    if not pyramids:
        raise ParameterError("cannot stack an empty batch")
    shapes = pyramids[0].shapes
    for index, pyramid in enumerate(pyramids):
        if pyramid.shapes != shapes:
            raise ShapeError(f"pyramid {index} has shapes {pyramid.shapes}, expected {shapes}")
    return [
        torch.from_numpy(np.stack([p.levels[level] for p in pyramids])).to(dtype)
        for level in range(len(shapes))
    ]


# --- gradients ---
def grad_nll(graph: UFlowGraph, features: FeaturePyramid | Sequence[FeaturePyramid]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of the batch-mean NLL for every trainable array."""
    batch = [features] if isinstance(features, FeaturePyramid) else list(features)
    graph.zero_grad(set_to_none=True)
    zs, logdet = graph(stack_pyramids(batch, graph.dtype))
    loss = negative_log_likelihood(zs, logdet).mean()
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss", layer="nll_loss")
    loss.backward()

    gradients = {}
    for name, parameter in graph.named_parameters():
        grad = parameter.grad if parameter.grad is not None else torch.zeros_like(parameter)
        if not torch.all(torch.isfinite(grad)):
            raise NumericError("non-finite gradient", layer=name)
        gradients[name] = grad.detach().clone()
    graph.zero_grad(set_to_none=True)
    return gradients


# --- initialization ---
def _initialize_actnorms(graph: UFlowGraph, batch: list[torch.Tensor]) -> None:
    for layer in graph.actnorms():
        layer.pending_init = True
    with torch.no_grad():
        graph(batch)
    graph.actnorm_initialized.fill_(1)


def actnorm_init(graph: UFlowGraph, first_batch: Sequence[FeaturePyramid]) -> None:
    """Data-dependent ActNorm initialization, layer by layer in forward order."""
    if not first_batch:
        raise ParameterError("actnorm_init needs a non-empty batch")
    if graph.is_initialized:
        raise ParameterError("actnorm layers are already initialized")
    _initialize_actnorms(graph, stack_pyramids(first_batch, graph.dtype))


def mean_nll(graph: UFlowGraph, data: list[torch.Tensor], batch_size: int = 64) -> float:
    total = 0.0
    count = data[0].shape[0]
    with torch.no_grad():
        for start in range(0, count, batch_size):
            zs, logdet = graph([x[start : start + batch_size] for x in data])
            total += float(negative_log_likelihood(zs, logdet).sum())
    return total / count


def train(graph: UFlowGraph, dataset: Sequence[FeaturePyramid], config: TrainConfig) -> TrainResult:
    """
    Mini-batch Adam on the exact NLL with gradient-norm clipping.

    The shuffle order comes from a seeded numpy generator, so identical
    seeds, configs and data give identical loss histories.
    """
    if not dataset:
        raise ParameterError("training needs a non-empty dataset")
    low, high = USUAL_LR_RANGE
    if not low <= config.learning_rate <= high:
        logger.warning("learning rate %g is outside the usual range [%g, %g]", config.learning_rate, low, high)

    data = stack_pyramids(dataset, graph.dtype)
    count = data[0].shape[0]
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(count)

    if not graph.is_initialized:
        first = torch.from_numpy(order[: config.batch_size])
        _initialize_actnorms(graph, [x[first] for x in data])
    result = TrainResult(graph=graph, initial_nll=mean_nll(graph, data))
    logger.info("Training on %d pyramids, initial NLL %.5f", count, result.initial_nll)

    optimizer = torch.optim.Adam(
        graph.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
    )
    graph.train()
    for epoch in range(1, config.epochs + 1):
        if epoch > 1:
            order = rng.permutation(count)
        total = 0.0
        for batch_index, start in enumerate(range(0, count, config.batch_size)):
            index = torch.from_numpy(order[start : start + config.batch_size])
            zs, logdet = graph([x[index] for x in data])
            losses = negative_log_likelihood(zs, logdet)
            loss = losses.mean()
            if not torch.isfinite(loss):
                raise TrainingError("NLL is not finite", epoch=epoch, batch=batch_index)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(graph.parameters(), config.gradient_clip_norm)
            optimizer.step()
            total += float(losses.detach().sum())
        result.history.append(total / count)
        logger.info("epoch %d mean NLL %.5f", epoch, result.history[-1])
    graph.eval()

    if result.history and result.history[-1] > result.initial_nll:
        logger.warning(
            "final NLL %.5f is above the initial %.5f", result.history[-1], result.initial_nll
        )
    return result


def write_loss_history(history: Sequence[float], path) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "mean_nll"])
        for epoch, value in enumerate(history, start=1):
            writer.writerow([epoch, repr(float(value))])

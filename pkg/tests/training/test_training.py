import csv
import math

import numpy as np
import pytest
import torch

from uflow import training
from uflow.features import FeaturePyramid, extract_multiscale
from uflow.flow import LatentPyramid, UFlowGraph, build_graph, uflow_forward
from uflow.flow.layers import ActNorm
from uflow.shared.errors import NumericError, ParameterError, TrainingError
from uflow.synthetic import SynthConfig, gen_dataset
from uflow.training import (
    TrainConfig,
    actnorm_init,
    grad_nll,
    log_likelihood,
    mean_nll,
    negative_log_likelihood,
    nll_loss,
    stack_pyramids,
    train,
    write_loss_history,
)
from tests.utils import identity_graph, random_pyramid, randomize_graph


def correlated_pyramids(count, seed=0):
    rng = np.random.default_rng(seed)
    pyramids = []
    for _ in range(count):
        levels = []
        for channels, size in ((8, 8), (16, 4)):
            shared = rng.standard_normal((1, size, size))
            levels.append((shared + 0.3 * rng.standard_normal((channels, size, size))).astype(np.float32))
        pyramids.append(FeaturePyramid(levels))
    return pyramids


def test_nll_loss_closed_forms():
    zeros = LatentPyramid(z=[np.zeros((2, 4, 4)), np.zeros((1, 2, 2))], logdet=0.0)
    assert nll_loss(zeros) == pytest.approx(0.91894, abs=1e-5)
    ones = LatentPyramid(z=[np.ones((2, 4, 4)), np.ones((1, 2, 2))], logdet=0.0)
    assert nll_loss(ones) == pytest.approx(1.41894, abs=1e-5)

    shifted = LatentPyramid(z=ones.z, logdet=3.0)
    assert nll_loss(ones) - nll_loss(shifted) == pytest.approx(3.0 / 36, rel=1e-12)

    with pytest.raises(NumericError):
        nll_loss(LatentPyramid(z=[np.array([[[np.nan]]])], logdet=0.0))


def test_log_likelihood_matches_nll():
    graph = randomize_graph(build_graph([8, 16], steps_per_stage=2), std=0.05)
    pyramid = random_pyramid([8, 16], (8, 8), seed=2)
    latents = uflow_forward(graph, pyramid)
    assert log_likelihood(graph, pyramid) == pytest.approx(-nll_loss(latents) * latents.dimension, rel=1e-5)


def test_grad_nll_matches_finite_differences():
    graph = randomize_graph(UFlowGraph([4], steps_per_stage=2, seed=3), seed=5, std=0.3).double()
    pyramid = random_pyramid([4], (2, 3), seed=8)
    analytic = grad_nll(graph, pyramid)
    xs = stack_pyramids([pyramid], torch.float64)

    def loss() -> float:
        with torch.no_grad():
            zs, logdet = graph(xs)
            return float(negative_log_likelihood(zs, logdet).mean())

    step = 1e-4
    for name, parameter in graph.named_parameters():
        numeric = torch.zeros_like(parameter)
        flat = parameter.data.view(-1)
        for index in range(flat.numel()):
            original = float(flat[index])
            flat[index] = original + step
            upper = loss()
            flat[index] = original - step
            lower = loss()
            flat[index] = original
            numeric.view(-1)[index] = (upper - lower) / (2 * step)
        np.testing.assert_allclose(analytic[name].numpy(), numeric.numpy(), rtol=1e-3, atol=1e-6, err_msg=name)


def test_grad_nll_on_identity_graph():
    graph = identity_graph([4], steps=2)
    pyramid = random_pyramid([4], (4, 4), seed=1)
    gradients = grad_nll(graph, pyramid)
    z = pyramid.levels[0].astype(np.float64)
    expected = z.sum(axis=(1, 2)) / z.size
    for index in range(2):
        np.testing.assert_allclose(gradients[f"stages.0.steps.{index}.actnorm.bias"].numpy(), expected, rtol=1e-5, atol=1e-7)

    zero_input = FeaturePyramid([np.zeros((4, 4, 4), dtype=np.float32)])
    for name, gradient in grad_nll(graph, zero_input).items():
        if ".coupling." in name and name.endswith("weight"):
            assert not gradient.any(), name


def test_actnorm_init_whitens_every_layer():
    graph = randomize_graph(build_graph([8, 16], steps_per_stage=2), std=0.1)
    batch = correlated_pyramids(8)
    actnorm_init(graph, batch)
    assert graph.is_initialized

    outputs = []
    hooks = [
        module.register_forward_hook(lambda _module, _inputs, result: outputs.append(result[0]))
        for module in graph.modules()
        if isinstance(module, ActNorm)
    ]
    with torch.no_grad():
        graph(stack_pyramids(batch))
    for hook in hooks:
        hook.remove()

    assert len(outputs) == 4
    for output in outputs:
        assert torch.all(torch.abs(output.mean(dim=(0, 2, 3))) < 1e-4)
        assert torch.all(torch.abs(output.std(dim=(0, 2, 3), unbiased=False) - 1) < 1e-3)

    with pytest.raises(ParameterError):
        actnorm_init(graph, batch)
    with pytest.raises(ParameterError):
        actnorm_init(build_graph([8, 16]), [])


def test_zero_epochs_only_initializes_actnorm():
    graph = build_graph([8, 16], steps_per_stage=2)
    before = {name: value.clone() for name, value in graph.state_dict().items()}
    result = train(graph, correlated_pyramids(4), TrainConfig(epochs=0, batch_size=4))
    assert result.history == []
    assert graph.is_initialized
    for name, value in graph.state_dict().items():
        if "actnorm" not in name:
            assert torch.equal(value, before[name]), name


def test_training_is_deterministic():
    config = TrainConfig(epochs=3, batch_size=4, seed=7)
    data = correlated_pyramids(10)
    first = train(build_graph([8, 16], steps_per_stage=2), data, config)
    second = train(build_graph([8, 16], steps_per_stage=2), data, config)
    assert first.history == second.history
    assert len(first.history) == 3


def test_training_beats_identity_baseline():
    data = correlated_pyramids(32)
    baseline = mean_nll(identity_graph([8, 16]), stack_pyramids(data))
    result = train(build_graph([8, 16], steps_per_stage=2), data, TrainConfig(epochs=15, batch_size=8))
    assert result.history[-1] < baseline
    assert result.history[-1] <= result.history[0] + 0.01


def test_training_on_standard_normal_reaches_entropy():
    # Per-dimension entropy of N(0, 1): the NLL floor for white features.
    entropy = 0.5 * math.log(2 * math.pi * math.e)
    train_set = [random_pyramid([8, 16], (8, 8), seed=seed) for seed in range(512)]
    held_out = [random_pyramid([8, 16], (8, 8), seed=10_000 + seed) for seed in range(64)]
    config = TrainConfig(epochs=2, batch_size=32, learning_rate=1e-4)
    result = train(build_graph([8, 16], steps_per_stage=2), train_set, config)

    assert abs(result.history[-1] - entropy) < 0.05
    assert abs(mean_nll(result.graph, stack_pyramids(held_out)) - entropy) < 0.05


def test_divergence_reports_epoch_and_batch(monkeypatch):
    def diverging(zs, logdet):
        return logdet * math.nan

    monkeypatch.setattr(training, "negative_log_likelihood", diverging)
    with pytest.raises(TrainingError) as info:
        train(build_graph([8, 16], steps_per_stage=1), correlated_pyramids(4), TrainConfig(epochs=2, batch_size=2))
    assert (info.value.epoch, info.value.batch) == (1, 0)
    assert info.value.exit_code == 5


def test_train_rejects_empty_dataset():
    with pytest.raises(ParameterError):
        train(build_graph([8, 16]), [], TrainConfig())


def test_loss_history_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_history([1.25, 0.9], path)
    with path.open() as handle:
        rows = list(csv.reader(handle))
    assert rows == [["epoch", "mean_nll"], ["1", "1.25"], ["2", "0.9"]]


@pytest.mark.slow
def test_trained_flow_whitens_held_out_features():
    dataset = gen_dataset(SynthConfig(n_train=240, n_test_normal=0, n_test_anomalous=0, seed=3))
    pyramids = [extract_multiscale(image, 2, 4, [16, 16]) for image in dataset.train]
    train_set, held_out = pyramids[:200], pyramids[200:]
    result = train(build_graph([16, 16]), train_set, TrainConfig(epochs=50, batch_size=16))

    per_scale = [[], []]
    for pyramid in held_out:
        for level, z in enumerate(uflow_forward(result.graph, pyramid).z):
            per_scale[level].append(z.ravel())
    for values in per_scale:
        pooled = np.concatenate(values)
        assert abs(pooled.mean()) < 0.1
        assert 0.85 <= pooled.std() <= 1.15

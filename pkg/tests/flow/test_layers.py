import math

import numpy as np
import pytest
import torch

from uflow.flow.layers import (
    ActNorm,
    AffineCoupling,
    InvertibleConv1x1,
    LUFactors,
    actnorm,
    affine_coupling,
    inv_conv_1x1,
    invertible_upsample,
)
from uflow.shared.errors import InvertibilityError, ShapeError


def random_batch(shape, seed=0, dtype=torch.float32):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_actnorm_identity_and_logdet():
    x = random_batch((2, 3, 4, 4))
    y, logdet = actnorm(x, torch.ones(3), torch.zeros(3))
    assert torch.equal(y, x)
    assert torch.all(logdet == 0)

    _, logdet = actnorm(torch.ones(1, 2, 2), torch.tensor([2.0]), torch.tensor([0.0]))
    assert float(logdet) == pytest.approx(4 * math.log(2), rel=1e-6)


def test_actnorm_round_trip_and_zero_scale():
    x = random_batch((2, 3, 5, 5))
    scale, bias = torch.tensor([0.5, -2.0, 3.0]), torch.tensor([0.1, 0.2, -0.3])
    y, logdet = actnorm(x, scale, bias)
    back, inverse_logdet = actnorm(y, scale, bias, reverse=True)
    assert torch.max(torch.abs(back - x)) < 1e-6
    assert torch.allclose(inverse_logdet, -logdet)
    with pytest.raises(InvertibilityError):
        actnorm(x, torch.tensor([1.0, 0.0, 1.0]), bias)


def test_actnorm_module_initializes_from_data():
    layer = ActNorm(3)
    x = 5.0 + 2.0 * random_batch((4, 3, 6, 6))
    layer.pending_init = True
    y, _ = layer(x)
    assert not layer.pending_init
    assert torch.all(torch.abs(y.mean(dim=(0, 2, 3))) < 1e-4)
    assert torch.all(torch.abs(y.std(dim=(0, 2, 3), unbiased=False) - 1) < 1e-3)

    constant = ActNorm(1)
    constant.pending_init = True
    constant(torch.full((2, 1, 3, 3), 7.0))
    assert float(constant.scale) == pytest.approx(1e6)


def test_inv_conv_identity_permutation_and_diagonal():
    x = random_batch((1, 3, 3, 3))
    eye = torch.eye(3)
    y, logdet = inv_conv_1x1(x, LUFactors(eye, eye, eye))
    assert torch.allclose(y, x)
    assert float(logdet) == 0.0

    permutation = eye[[2, 0, 1]]
    y, logdet = inv_conv_1x1(x, LUFactors(permutation, eye, eye))
    assert torch.equal(y[:, 0], x[:, 2])
    assert float(logdet) == 0.0

    x2 = random_batch((1, 2, 3, 3))
    eye2 = torch.eye(2)
    y, logdet = inv_conv_1x1(x2, LUFactors(eye2, eye2, torch.diag(torch.tensor([2.0, 0.5]))))
    assert torch.allclose(y[:, 0], 2 * x2[:, 0])
    assert float(logdet) == pytest.approx(0.0, abs=1e-6)


def test_inv_conv_round_trip_and_zero_diagonal():
    layer = InvertibleConv1x1(6, np.random.default_rng(0))
    with torch.no_grad():
        layer.lower.add_(0.1)
        layer.upper.add_(0.1)
    x = random_batch((2, 6, 4, 4))
    y, logdet = layer(x)
    back, inverse_logdet = layer(y, reverse=True)
    assert torch.max(torch.abs(back - x)) < 1e-5
    assert torch.allclose(inverse_logdet, -logdet)
    assert float(logdet[0]) == pytest.approx(
        16 * math.log(abs(float(torch.det(layer.factors().weight().double())))), abs=1e-4
    )

    eye = torch.eye(2)
    with pytest.raises(InvertibilityError):
        inv_conv_1x1(random_batch((1, 2, 2, 2)), LUFactors(eye, eye, torch.diag(torch.tensor([1.0, 0.0]))))


def test_coupling_zero_subnet_is_identity():
    layer = AffineCoupling(4, 3, clamp=2.0)
    for parameter in layer.parameters():
        torch.nn.init.zeros_(parameter)
    x = random_batch((2, 4, 5, 5))
    y, logdet = layer(x)
    assert torch.equal(y, x)
    assert torch.all(logdet == 0)


def test_coupling_scale_is_clamped():
    def saturated(x_a):
        return torch.cat([torch.full_like(x_a, 1e3), torch.zeros_like(x_a)], dim=1)

    x = torch.ones(1, 2, 1, 1)
    y, logdet = affine_coupling(x, saturated, clamp=2.0)
    assert float(y[0, 1, 0, 0]) == pytest.approx(math.exp(2.0), rel=1e-6)
    assert float(logdet) == pytest.approx(2.0, rel=1e-6)


def test_coupling_round_trip_and_odd_channels():
    layer = AffineCoupling(6, 3, clamp=2.0)
    torch.nn.init.normal_(layer.subnet[-1].weight, std=0.2)
    x = random_batch((2, 6, 5, 5))
    y, logdet = layer(x)
    back, inverse_logdet = layer(y, reverse=True)
    assert torch.max(torch.abs(back - x)) < 1e-5
    assert torch.allclose(inverse_logdet, -logdet)
    with pytest.raises(ShapeError):
        affine_coupling(random_batch((1, 3, 2, 2)), lambda x_a: x_a, clamp=2.0)


def test_upsample_layout():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)
    y = invertible_upsample(x)
    assert y.shape == (1, 2, 2)
    assert y[0].tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_upsample_layout_matches_channel_formula():
    x = random_batch((8, 3, 2))
    y = invertible_upsample(x)
    for k in range(2):
        for r in range(2):
            for c in range(2):
                assert torch.equal(y[k, r::2, c::2], x[4 * k + 2 * r + c])


def test_upsample_round_trip_and_errors():
    x = random_batch((2, 8, 3, 5))
    y = invertible_upsample(x)
    assert torch.equal(invertible_upsample(y, reverse=True), x)
    assert torch.equal(torch.sort(y.flatten()).values, torch.sort(x.flatten()).values)
    with pytest.raises(ShapeError):
        invertible_upsample(random_batch((1, 6, 2, 2)))
    with pytest.raises(ShapeError):
        invertible_upsample(random_batch((1, 2, 3, 2)), reverse=True)

from __future__ import annotations

import numpy as np
import pytest

from tbiseg import nn
from tbiseg.models import (
    DenseNetSpec,
    UNetPPSpec,
    UNetSpec,
    build_densenet2d,
    build_model,
    build_unet3d,
    build_unetpp3d,
    predict_probability,
    sliding_window_positions,
)
from tbiseg.training import cross_entropy, dice_ce_loss
from tbiseg.volume import Volume


def _double_conv(cin, cout):
    # two 3^3 convs with bias, each followed by instance-norm gamma/beta
    return 27 * cin * cout + cout + 2 * cout + 27 * cout * cout + cout + 2 * cout


def unet_closed_form(base, depth, cin=1, classes=2):
    w = [base * 2**i for i in range(depth + 1)]
    total = sum(_double_conv(cin if i == 0 else w[i - 1], w[i]) for i in range(depth + 1))
    for i in range(depth):
        total += 8 * w[i + 1] * w[i] + w[i]  # transposed conv 2^3
        total += _double_conv(2 * w[i], w[i])
    return total + classes * w[0] + classes


def test_unet_forward_shape_and_softmax():
    g = build_unet3d(UNetSpec(base_width=8, depth=3))
    x = np.random.default_rng(0).normal(size=(1, 1, 32, 32, 32)).astype(np.float32)
    y = g.predict(x)
    assert y.shape == (1, 2, 32, 32, 32)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("base,depth", [(8, 3), (4, 2), (2, 1)])
def test_unet_parameter_count_closed_form(base, depth):
    assert build_unet3d(UNetSpec(base_width=base, depth=depth)).parameter_count() == unet_closed_form(base, depth)


def test_unet_base8_depth3_count_value():
    assert unet_closed_form(8, 3) == 351170


def test_unet_indivisible_input():
    g = build_unet3d(UNetSpec(base_width=2, depth=3))
    with pytest.raises(nn.ShapeError):
        g.predict(np.zeros((1, 1, 30, 30, 30), np.float32))


def test_spec_validation():
    with pytest.raises(ValueError):
        UNetSpec(depth=0)
    with pytest.raises(ValueError):
        UNetSpec(classes=3)
    with pytest.raises(ValueError):
        DenseNetSpec(growth_rate=0)
    with pytest.raises(ValueError):
        build_model("resnet", {})


def test_unetpp_more_parameters_and_shape():
    for depth in (2, 3):
        u = build_unet3d(UNetSpec(base_width=4, depth=depth))
        pp = build_unetpp3d(UNetPPSpec(base_width=4, depth=depth))
        assert pp.parameter_count() > u.parameter_count()
    x = np.zeros((1, 1, 16, 16, 8), np.float32)
    assert build_unetpp3d(UNetPPSpec(base_width=2, depth=2)).predict(x).shape == (1, 2, 16, 16, 8)


def _structure(g, x):
    nodes = g.trace(x)
    return [(n.op, n.inputs, n.shape) for n in nodes]


def test_depth1_unetpp_isomorphic_to_unet():
    spec = dict(base_width=3, depth=1, seed=5)
    u, pp = build_unet3d(UNetSpec(**spec)), build_unetpp3d(UNetPPSpec(**spec))
    x = np.zeros((1, 1, 4, 4, 4), np.float32)
    assert _structure(u, x) == _structure(pp, x)
    assert [p.shape for p in u.params.values()] == [p.shape for p in pp.params.values()]
    # identical parameter values (same seed, same registration order) give identical outputs
    xr = np.random.default_rng(0).normal(size=(1, 1, 4, 4, 4)).astype(np.float32)
    assert np.array_equal(u.predict(xr), pp.predict(xr))


def test_densenet_channel_trace_hand_verified():
    g = build_densenet2d(DenseNetSpec(growth_rate=4, layers_per_block=2, blocks=1, stem_channels=8))
    # stem 8 -> +4 -> +4 -> transition keeps 16 (compression 1)
    assert g.channel_trace == [8, 12, 16, 16]


@pytest.mark.parametrize("c,L,k", [(8, 3, 5), (6, 1, 2), (1, 4, 3)])
def test_densenet_block_output_channels(c, L, k):
    g = build_densenet2d(DenseNetSpec(growth_rate=k, layers_per_block=L, blocks=1, stem_channels=c))
    assert g.channel_trace[L] == c + L * k


def test_densenet_outputs_probabilities():
    g = build_densenet2d(DenseNetSpec(growth_rate=4, blocks=2))
    p = g.predict(np.random.default_rng(1).normal(size=(3, 1, 16, 16)).astype(np.float32))
    assert p.shape == (3, 2) and np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


# micro-scale gradient checks over every parameter of each architecture


def _seg_loss(g, x, t):
    return lambda: dice_ce_loss(g(x), t)


@pytest.mark.parametrize("kind", ["unet", "unetpp"])
def test_segmentation_architecture_gradients(kind):
    rng = np.random.default_rng(2)
    spec = {"base_width": 2, "depth": 2, "in_channels": 2, "seed": 1}
    g = build_model(kind, spec)
    x = nn.Tensor(rng.normal(size=(1, 2, 8, 8, 8)))
    t = (rng.random((1, 8, 8, 8)) > 0.7).astype(np.float64)
    err = nn.gradient_check(_seg_loss(g, x, t), list(g.params.values()), n_samples=48)
    assert err <= 1e-2


def test_densenet_architecture_gradients():
    rng = np.random.default_rng(3)
    g = build_densenet2d(DenseNetSpec(growth_rate=2, layers_per_block=2, blocks=2, stem_channels=2, in_channels=2, seed=2))
    x = nn.Tensor(rng.normal(size=(4, 2, 8, 8)))
    labels = np.array([0, 1, 1, 0])
    # relu after batch norm has kinks close to sampled points; a smaller
    # float64 step keeps the central difference on one side of them
    err = nn.gradient_check(lambda: cross_entropy(g(x), labels), list(g.params.values()), n_samples=48, eps=1e-6)
    assert err <= 1e-2


# sliding-window inference


@pytest.mark.parametrize("n,patch,overlap", [(48, 32, 0.5), (32, 32, 0.5), (40, 16, 0.25), (17, 8, 0.5)])
def test_window_positions_cover_and_symmetric(n, patch, overlap):
    pos = sliding_window_positions(n, patch, overlap)
    covered = np.zeros(n, bool)
    for p in pos:
        covered[p : p + patch] = True
    assert covered.all() and pos[0] == 0 and pos[-1] == n - patch
    assert sorted(n - patch - p for p in pos) == pos


class _Const(nn.Graph):
    """Stub network predicting a fixed lesion probability everywhere."""

    def __init__(self, p):
        super().__init__()
        self.p = p

    def predict(self, x):
        out = np.empty((x.shape[0], 2) + x.shape[2:], np.float32)
        out[:, 1] = self.p
        out[:, 0] = 1 - self.p
        return out


def test_constant_windows_average_to_constant():
    v = Volume(np.zeros((24, 20, 16), np.float32))
    out = predict_probability(_Const(0.3), v, patch=(16, 16, 16), overlap=0.5)
    assert out.shape == v.shape
    assert np.allclose(out.data, 0.3, atol=1e-7)


def test_volume_smaller_than_patch():
    g = build_unet3d(UNetSpec(base_width=2, depth=2))
    v = Volume(np.random.default_rng(0).normal(size=(10, 12, 7)).astype(np.float32), (1.0, 1.0, 2.0))
    out = predict_probability(g, v, patch=(16, 16, 16))
    assert out.shape == v.shape and out.spacing == v.spacing
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_probability_bounds_random(rng):
    g = build_unet3d(UNetSpec(base_width=2, depth=1))
    out = predict_probability(g, rng.normal(scale=50, size=(12, 12, 12)), patch=(8, 8, 8), overlap=0.5)
    assert np.all((out.data >= 0) & (out.data <= 1))
    with pytest.raises(ValueError):
        predict_probability(g, np.zeros((8, 8, 8)), patch=(8, 8, 8), overlap=1.0)

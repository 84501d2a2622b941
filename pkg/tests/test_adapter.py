import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from expandnet.adapter import (
    FeatureAdapter,
    PlainAdapter1x1,
    ResidualAdapter1x1,
    adapter_forward,
    adapter_param_count,
    build_adapter,
    channel_plan,
)
from expandnet.errors import ConfigurationError, InputError

from oracles import array_size_sum, central_diff, rel_err


def conv_sizes(adapter):
    return array_size_sum([t for k, t in adapter.state_dict().items() if k.startswith("theta")])


@pytest.mark.parametrize("c, plan", [(6, (6, 2, 1, 6)), (64, (64, 21, 10, 64)), (1, (1, 1, 1, 1)), (12, (12, 4, 2, 12))])
def test_channel_plan(c, plan):
    assert channel_plan(c) == plan
    assert build_adapter(c).plan == plan


def test_c6_counts():
    a = build_adapter(6)
    pc = adapter_param_count(a)
    assert pc.conv == 36 == conv_sizes(a)
    assert pc.bn_affine == 18
    assert pc.total == 54


def test_c64_floor_rounding():
    a = build_adapter(64)
    assert adapter_param_count(a).conv == 3874 == conv_sizes(a)


def test_c12_count():
    assert adapter_param_count(build_adapter(12)).conv == 144


@given(st.integers(1, 200))
@settings(max_examples=60, deadline=None)
def test_conv_count_matches_arrays_and_bound(c):
    a = FeatureAdapter(c)
    n = a.param_count().conv
    assert n == conv_sizes(a)
    if c == 1:
        # the clamp gives plan (1, 1, 1, 1): 1 + 9 + 1 weights, one more than c^2 + 9c
        assert n == 11
    else:
        assert n <= c * c + 9 * c
    if c % 6 == 0:
        assert n == c * c


def test_rejects_bad_channels():
    with pytest.raises(ConfigurationError):
        build_adapter(0)
    with pytest.raises(ConfigurationError):
        channel_plan(-3)
    with pytest.raises(ConfigurationError):
        build_adapter(6, variant="nope")


def test_channel_mismatch():
    with pytest.raises(InputError):
        adapter_forward(build_adapter(6), torch.zeros(2, 5, 4, 4))


def test_zero_weights_give_zero_correction():
    a = build_adapter(12)
    with torch.no_grad():
        for conv in a.convs():
            conv.weight.zero_()
    h = torch.randn(4, 12, 5, 5)
    assert torch.equal(adapter_forward(a, h, training=False), torch.zeros_like(h))
    assert torch.equal(adapter_forward(a, h, training=True), torch.zeros_like(h))


def test_shape_and_nonnegative():
    torch.manual_seed(0)
    a = build_adapter(64)
    h = torch.randn(8, 64, 16, 16)
    out = adapter_forward(a, h, training=True)
    assert out.shape == h.shape
    assert bool((out >= 0).all())


def test_outer_relu_switch():
    torch.manual_seed(0)
    a = build_adapter(12, outer_relu=False)
    out = adapter_forward(a, torch.randn(8, 12, 4, 4), training=True)
    assert bool((out < 0).any())


@given(st.integers(1, 40), st.integers(1, 6), st.integers(1, 6))
@settings(max_examples=25, deadline=None)
def test_shape_preserved(c, h, w):
    a = build_adapter(c)
    x = torch.randn(2, c, h, w)
    assert adapter_forward(a, x, training=True).shape == x.shape


def test_init_scheme():
    a = build_adapter(12)
    for n in a.norms():
        assert torch.equal(n.weight, torch.ones_like(n.weight))
        assert torch.equal(n.bias, torch.zeros_like(n.bias))
        assert torch.equal(n.running_mean, torch.zeros_like(n.running_mean))
    # fan-in scaled uniform: |w| <= 1/sqrt(fan_in)
    for conv in a.convs():
        fan_in = conv.weight[0].numel()
        assert float(conv.weight.detach().abs().max()) <= 1 / fan_in ** 0.5 + 1e-7


def test_eval_uses_running_stats():
    torch.manual_seed(0)
    a = build_adapter(6)
    x = torch.randn(4, 6, 3, 3)
    before = [n.running_mean.clone() for n in a.norms()]
    adapter_forward(a, x, training=False)
    assert all(torch.equal(b, n.running_mean) for b, n in zip(before, a.norms()))
    adapter_forward(a, x, training=True)
    assert not all(torch.equal(b, n.running_mean) for b, n in zip(before, a.norms()))


def test_gradient_check_c6():
    """Every conv weight gradient vs central differences, away from ReLU kinks."""
    torch.manual_seed(3)
    a = FeatureAdapter(6).double()
    a.eval()
    with torch.no_grad():
        # running statistics chosen so each stage sees clearly positive pre-activations
        for n in a.norms():
            n.running_mean.zero_()
            n.running_var.fill_(1.0)
            n.bias.fill_(2.0)
    x = torch.rand(1, 6, 2, 2, dtype=torch.float64) * 0.5 + 0.5
    target = torch.randn(1, 6, 2, 2, dtype=torch.float64)

    def loss():
        return ((a(x) - target) ** 2).sum()

    # pre-activations at every stage must stay away from the kink
    with torch.no_grad():
        z1 = a.bn1(a.theta1(x))
        z2 = a.bn2(a.theta2(torch.relu(z1)))
        z3 = a.bn3(a.theta3(torch.relu(z2)))
        assert float(torch.cat([z1.flatten(), z2.flatten(), z3.flatten()]).abs().min()) > 1e-2

    a.zero_grad()
    loss().backward()
    worst = 0.0
    for conv in a.convs():
        for idx in torch.cartesian_prod(*[torch.arange(s) for s in conv.weight.shape]):
            idx = tuple(int(i) for i in idx)
            num = central_diff(loss, conv.weight.data, idx, 1e-3)
            ana = float(conv.weight.grad[idx])
            worst = max(worst, rel_err(ana, num, floor=1e-8))
    assert worst < 1e-4


def test_comparison_variants():
    c = 12
    h = torch.randn(3, c, 4, 4)
    plain = PlainAdapter1x1(c)
    # identity init: correction starts at exactly zero
    assert torch.allclose(plain(h), torch.zeros_like(h), atol=1e-6)
    assert plain.param_count().conv == c * c
    res = ResidualAdapter1x1(c)
    assert res.param_count().conv == c * c and res.param_count().bn_affine == 2 * c
    assert res(h).shape == h.shape

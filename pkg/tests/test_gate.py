import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from expandnet.errors import ConfigurationError, InputError
from expandnet.gate import (
    GateModule,
    gate_probs,
    gumbel_max,
    gumbel_softmax,
    sample_gumbel,
    sample_gumbel_max,
    straight_through_decision,
)
from expandnet._utils import make_generator

from oracles import central_diff, gumbel_max_probability, rel_err


def pair(alpha, n):
    return torch.tensor([[1 - alpha, alpha]], dtype=torch.float64).repeat(n, 1)


def test_hidden_width():
    assert GateModule(16).hidden == 4
    assert GateModule(128).hidden == 8
    assert GateModule(3).hidden == 4


def test_zero_fc2_gives_half():
    g = GateModule(8)
    p = gate_probs(g, torch.randn(5, 8, 3, 3))
    assert torch.equal(p, torch.full((5, 2), 0.5))


def test_rows_sum_to_one_and_identical_samples():
    torch.manual_seed(0)
    g = GateModule(8)
    torch.nn.init.normal_(g.fc2.weight)
    x = torch.randn(1, 8, 3, 3).repeat(2, 1, 1, 1)
    p = gate_probs(g, x)
    assert torch.allclose(p.sum(1), torch.ones(2), atol=1e-6)
    assert torch.equal(p[0], p[1])


def test_channel_mismatch():
    with pytest.raises(InputError):
        gate_probs(GateModule(8), torch.zeros(1, 4, 2, 2))


def test_bad_tau():
    with pytest.raises(ConfigurationError):
        GateModule(8, tau=0)
    with pytest.raises(ConfigurationError):
        gumbel_softmax(pair(0.5, 1), torch.zeros(1, 2), tau=-1.0)


def test_rng_required():
    with pytest.raises(InputError):
        sample_gumbel((2, 2), None)


def test_frequency_at_07():
    hard = sample_gumbel_max(pair(0.7, 10_000), make_generator(0))
    assert abs(float(hard.mean()) - 0.7) < 0.02


def test_tie_goes_to_skip():
    assert float(gumbel_max(pair(0.5, 1), torch.zeros(1, 2))[0]) == 0.0


def test_clamped_alpha_never_fires():
    p = torch.tensor([[1.0, 0.0]], dtype=torch.float64).repeat(10_000, 1)
    hard = sample_gumbel_max(p, make_generator(1))
    assert float(hard.mean()) <= 1e-6


@pytest.mark.parametrize("alpha", [0.05, 0.3, 0.62, 0.95])
def test_gumbel_max_law_by_quadrature(alpha):
    """The exact firing probability from numerical integration equals alpha."""
    assert abs(gumbel_max_probability(alpha) - alpha) < 1e-7


@pytest.mark.parametrize("alpha", [0.2, 0.5, 0.8])
def test_kolmogorov_distance(alpha):
    hard = sample_gumbel_max(pair(alpha, 10_000), make_generator(7)).numpy()
    emp = np.array([np.mean(hard == 0), 1.0])
    true = np.array([1 - alpha, 1.0])
    assert np.max(np.abs(emp - true)) < 0.02


def test_gumbel_softmax_symmetry():
    for tau in (0.1, 1.0, 5.0):
        y = gumbel_softmax(pair(0.5, 1), torch.zeros(1, 2, dtype=torch.float64), tau)
        assert torch.allclose(y, torch.full((1, 2), 0.5, dtype=torch.float64))


def test_low_temperature_limit():
    p = torch.tensor([[0.3, 0.7]], dtype=torch.float64)
    g = torch.tensor([[0.1, -0.05]], dtype=torch.float64)
    y = gumbel_softmax(p, g, 1e-3)
    assert torch.allclose(y, torch.tensor([[0.0, 1.0]], dtype=torch.float64), atol=1e-3)


def test_gumbel_softmax_grad_fd():
    p = torch.tensor([[0.35, 0.65]], dtype=torch.float64, requires_grad=True)
    g = torch.tensor([[0.3, -0.2]], dtype=torch.float64)
    for k in range(2):
        p.grad = None
        gumbel_softmax(p, g, 1.0)[0, k].backward()
        for i in range(2):
            num = central_diff(lambda: gumbel_softmax(p, g, 1.0)[0, k], p.data, (0, i), 1e-6)
            assert rel_err(float(p.grad[0, i]), num) < 1e-4


@given(st.floats(0.01, 0.99), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_gumbel_softmax_rows_sum_to_one(alpha, seed):
    g = sample_gumbel((4, 2), make_generator(seed), torch.float64)
    y = gumbel_softmax(pair(alpha, 4), g, 0.7)
    assert torch.allclose(y.sum(1), torch.ones(4, dtype=torch.float64))


def _strong_gate(c=8, bias=10.0):
    g = GateModule(c)
    with torch.no_grad():
        g.fc2.bias.copy_(torch.tensor([-bias, bias]))
    return g


def test_train_mode_hard_values():
    torch.manual_seed(0)
    g = GateModule(8)
    torch.nn.init.normal_(g.fc2.weight)
    d = straight_through_decision(g, torch.randn(64, 8, 2, 2), "train", make_generator(0))
    assert set(d.value.tolist()) <= {0.0, 1.0}
    assert torch.equal(d.value, d.hard)
    assert torch.allclose(d.soft.sum(1), torch.ones(64))


def test_strong_gate_fires():
    g = _strong_gate(bias=4.0)  # alpha = sigmoid(8) ~ 0.99966
    d = straight_through_decision(g, torch.randn(10_000, 8, 1, 1), "train", make_generator(2))
    assert float(d.hard.mean()) >= 0.998


def test_eval_argmax_deterministic():
    g = GateModule(8)
    with torch.no_grad():
        g.fc2.bias.copy_(torch.tensor([0.0, float(np.log(9.0))]))  # alpha = 0.9
    x = torch.randn(16, 8, 2, 2)
    runs = [straight_through_decision(g, x, "eval").hard for _ in range(3)]
    assert all(torch.equal(r, torch.ones(16)) for r in runs)


def test_eval_policies():
    g = GateModule(8)
    with torch.no_grad():
        g.fc2.bias.copy_(torch.tensor([0.0, float(np.log(3.0))]))  # alpha = 0.75
    x = torch.randn(4000, 8, 1, 1)
    soft = straight_through_decision(g, x, "eval", eval_policy="soft").value
    assert torch.allclose(soft, torch.full((4000,), 0.75))
    sample = straight_through_decision(g, x, "eval", make_generator(0), eval_policy="sample").value
    assert abs(float(sample.mean()) - 0.75) < 0.03
    with pytest.raises(ConfigurationError):
        straight_through_decision(g, x, "eval", eval_policy="median")


def test_straight_through_gradient_is_soft_gradient():
    torch.manual_seed(1)
    g = GateModule(8).double()
    torch.nn.init.normal_(g.fc2.weight)
    x = torch.randn(6, 8, 2, 2, dtype=torch.float64)
    w = torch.randn(6, dtype=torch.float64)

    g.zero_grad()
    d = straight_through_decision(g, x, "train", make_generator(5))
    (d.value * w).sum().backward()
    st_grad = g.fc2.weight.grad.clone()

    g.zero_grad()
    d2 = straight_through_decision(g, x, "train", make_generator(5), relaxed=True)
    (d2.value * w).sum().backward()
    assert torch.equal(d.hard, d2.hard)
    assert torch.allclose(st_grad, g.fc2.weight.grad)
    assert float(st_grad.abs().sum()) > 0

"""Feature adapters: task-specific residual corrections to frozen features.

:class:`FeatureAdapter` is the 1x1 -> 3x3 -> 1x1 bottleneck with channel plan
``(c, c//3, c//6, c)`` and a batch-norm after every convolution. The two
single 1x1 adapters below it exist only as comparison baselines.

All adapters compute the *correction* ``D(H)``; the residual add lives in
:mod:`expandnet.aes`.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError


def channel_plan(c):
    """(c, m1, m2, c) with floor division clamped to 1."""
    if c < 1:
        raise ConfigurationError(f"channel count must be >= 1, got {c}")
    return (c, max(c // 3, 1), max(c // 6, 1), c)


@dataclass(frozen=True)
class ParamCount:
    conv: int
    bn_affine: int

    @property
    def total(self):
        return self.conv + self.bn_affine


def _conv_macs(conv: nn.Conv2d, h, w):
    # stride 1, size-preserving padding everywhere in this module
    kh, kw = conv.kernel_size
    return conv.out_channels * h * w * conv.in_channels * kh * kw // conv.groups


class _AdapterBase(nn.Module):
    c: int

    def _check(self, h):
        if h.dim() != 4 or h.shape[1] != self.c:
            raise InputError(f"adapter expects (batch, {self.c}, h, w) input, got {tuple(h.shape)}")

    def convs(self):
        return [m for m in self.modules() if isinstance(m, nn.Conv2d)]

    def norms(self):
        return [m for m in self.modules() if isinstance(m, nn.BatchNorm2d)]

    def group_weights(self):
        """The weights regularized as one group (conv kernels only)."""
        return [conv.weight for conv in self.convs()]

    def param_count(self) -> ParamCount:
        conv = sum(w.numel() for w in self.group_weights())
        bn = sum(n.weight.numel() + n.bias.numel() for n in self.norms() if n.affine)
        return ParamCount(conv, bn)

    def macs(self, h, w):
        return sum(_conv_macs(conv, h, w) for conv in self.convs())


class FeatureAdapter(_AdapterBase):
    """Three-convolution bottleneck with per-task batch normalization.

    ``D(H) = relu(bn3(conv3(relu(bn2(conv2(relu(bn1(conv1(H)))))))))``; the
    outermost ReLU can be switched off with ``outer_relu=False``.
    """

    def __init__(self, c, outer_relu=True):
        super().__init__()
        c, m1, m2, _ = channel_plan(c)
        self.c, self.m1, self.m2 = c, m1, m2
        self.outer_relu = outer_relu
        self.theta1 = nn.Conv2d(c, m1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(m1)
        self.theta2 = nn.Conv2d(m1, m2, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(m2)
        self.theta3 = nn.Conv2d(m2, c, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(c)
        # nn.Conv2d already uses fan-in scaled uniform init; BN starts as identity

    @property
    def plan(self):
        return (self.c, self.m1, self.m2, self.c)

    def convs(self):
        return [self.theta1, self.theta2, self.theta3]

    def forward(self, h):
        self._check(h)
        out = F.relu(self.bn1(self.theta1(h)))
        out = F.relu(self.bn2(self.theta2(out)))
        out = self.bn3(self.theta3(out))
        return F.relu(out) if self.outer_relu else out


class PlainAdapter1x1(_AdapterBase):
    """Comparison baseline: new features are a linear recombination ``W H``.

    Expressed as a correction, ``D(H) = W H - H``, so the residual block
    outputs ``W H`` when active. ``W`` starts at the identity.
    """

    def __init__(self, c):
        super().__init__()
        self.c = c
        self.theta = nn.Conv2d(c, c, 1, bias=False)
        nn.init.eye_(self.theta.weight.view(c, c))

    def forward(self, h):
        self._check(h)
        return self.theta(h) - h


class ResidualAdapter1x1(_AdapterBase):
    """Comparison baseline: ``D(H) = BN(W H)`` added to the frozen feature."""

    def __init__(self, c):
        super().__init__()
        self.c = c
        self.theta = nn.Conv2d(c, c, 1, bias=False)
        self.bn = nn.BatchNorm2d(c)

    def forward(self, h):
        self._check(h)
        return self.bn(self.theta(h))


ADAPTER_VARIANTS = {
    "feature": FeatureAdapter,
    "plain1x1": PlainAdapter1x1,
    "residual1x1": ResidualAdapter1x1,
}


def build_adapter(c, variant="feature", outer_relu=True):
    if variant not in ADAPTER_VARIANTS:
        raise ConfigurationError(f"unknown adapter variant {variant!r}")
    if c < 1:
        raise ConfigurationError(f"channel count must be >= 1, got {c}")
    if variant == "feature":
        return FeatureAdapter(c, outer_relu=outer_relu)
    return ADAPTER_VARIANTS[variant](c)


def adapter_forward(adapter, h, training=False):
    adapter.train(training)
    return adapter(h)


def adapter_param_count(adapter) -> ParamCount:
    return adapter.param_count()

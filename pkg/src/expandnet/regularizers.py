"""Sparsity-activation regularization.

Each adapter's convolution kernels form one group. The group-lasso term
shrinks whole adapters; the activation term pulls each gate's firing rate
toward the fraction of its adapter's weights that are still above a
magnitude threshold, so gates of sparse adapters switch off and those
adapters become prunable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, InputError

LAMBDA_S_MODES = ("adaptive", "constant")


@dataclass
class RegConfig:
    sigma_threshold: float = 0.01
    lambda_a: float = 0.001
    lambda_s_mode: str = "adaptive"
    lambda_s_constant: float = 0.0
    recompute_period: int = 1
    grad_through_rs: bool = False

    def __post_init__(self):
        if not self.sigma_threshold > 0:
            raise ConfigurationError("sigma_threshold must be > 0")
        if not 0 <= self.lambda_a <= 1:
            raise ConfigurationError(f"lambda_a must lie in [0, 1], got {self.lambda_a}")
        if self.lambda_s_mode not in LAMBDA_S_MODES:
            raise ConfigurationError(f"lambda_s_mode must be one of {LAMBDA_S_MODES}")
        if self.lambda_s_constant < 0:
            raise ConfigurationError("lambda_s_constant must be >= 0")
        if self.recompute_period < 1:
            raise ConfigurationError("recompute_period must be >= 1")
        if self.grad_through_rs:
            # the threshold indicator has no useful gradient; kept for config compatibility
            raise ConfigurationError("grad_through_rs=True is not supported")


@dataclass
class LayerStats:
    sparsity_ratio: float = 0.0
    activation_ratio: float = 0.0
    grad_magnitude_sum: float = 0.0
    lambda_s_prime: float = 0.0


def _group(item):
    if hasattr(item, "group_weights"):
        return list(item.group_weights())
    if torch.is_tensor(item):
        return [item]
    return list(item)


class _GroupNorm(torch.autograd.Function):
    # gradient at the exact origin is the zero subgradient

    @staticmethod
    def forward(ctx, flat):
        norm = torch.sqrt((flat * flat).sum())
        ctx.save_for_backward(flat, norm)
        return norm

    @staticmethod
    def backward(ctx, grad):
        flat, norm = ctx.saved_tensors
        if norm == 0:
            return torch.zeros_like(flat)
        return grad * flat / norm


def group_norm(item):
    """L2 norm of all weights in one group, with a zero subgradient at 0."""
    flat = torch.cat([w.reshape(-1) for w in _group(item)])
    return _GroupNorm.apply(flat)


def sparsity_loss(adapters, weights):
    """``sum_j weights[j] * ||Omega_j||_2`` over the given adapters."""
    adapters = list(adapters)
    weights = list(weights) if not torch.is_tensor(weights) else weights
    if len(weights) != len(adapters):
        raise ConfigurationError(f"{len(adapters)} adapters but {len(weights)} sparsity weights")
    total = None
    for adapter, w in zip(adapters, weights):
        term = float(w) * group_norm(adapter)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def sparsity_ratio(adapter, sigma=0.01):
    """Fraction of group weights with ``|theta| >= sigma``."""
    if not sigma > 0:
        raise ConfigurationError("sigma must be > 0")
    flat = torch.cat([w.detach().reshape(-1) for w in _group(adapter)])
    if flat.numel() == 0:
        return 0.0
    return float((flat.abs() >= sigma).sum()) / flat.numel()


def activation_ratio(decisions):
    """Mean gate decision over a batch; keeps the autograd graph of ``decisions``."""
    if not torch.is_tensor(decisions):
        decisions = torch.as_tensor(decisions, dtype=torch.float64)
    if decisions.numel() == 0:
        raise InputError("activation ratio of an empty batch")
    if not decisions.is_floating_point():
        decisions = decisions.double()
    return decisions.mean()


def activation_loss(sparsity_ratios, activation_ratios):
    """``(1/L) sum_j (R^s_j - R^a_j)^2``.

    Sparsity ratios are constants; activation ratios may carry gradients.
    """
    sparsity_ratios = list(sparsity_ratios)
    activation_ratios = list(activation_ratios)
    if len(sparsity_ratios) != len(activation_ratios):
        raise ConfigurationError("need one sparsity and one activation ratio per layer")
    n = len(sparsity_ratios)
    if n == 0:
        raise ConfigurationError("activation loss over zero layers")
    total = 0.0
    for rs, ra in zip(sparsity_ratios, activation_ratios):
        rs = float(rs)
        total = total + (rs - ra) ** 2
    return total / n


def adaptive_lambda(grad_sums):
    """Reflected min-max normalization of per-layer gradient magnitudes.

    The layer with the largest sum gets 0 (least sparsified), the smallest
    gets 1; an all-equal input maps to 0.5 everywhere.
    """
    g = np.asarray(grad_sums, dtype=np.float64)
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise InputError("gradient sums must be finite and non-negative")
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.full_like(g, 0.5)
    return 1.0 - (g - lo) / (hi - lo)


def total_loss(ce, adapters, sparsity_ratios, activation_ratios, cfg: RegConfig, lambdas=None):
    """Cross-entropy plus weighted group lasso plus ``lambda_a`` times the activation term.

    ``lambdas`` is the per-layer sparsity weight vector (adaptive mode); in
    constant mode every layer gets ``cfg.lambda_s_constant``.
    """
    adapters = list(adapters)
    if cfg.lambda_s_mode == "constant" or lambdas is None:
        lambdas = [cfg.lambda_s_constant] * len(adapters)
    sparse = sparsity_loss(adapters, lambdas)
    active = activation_loss(sparsity_ratios, activation_ratios) if len(adapters) else 0.0
    return ce + sparse + cfg.lambda_a * active

"""Binary execution gate with Gumbel-Max sampling and a straight-through
Gumbel-Softmax gradient.

Index 0 of every probability pair means "skip the adapter", index 1 means
"execute it". Random draws always come from an explicitly passed
``torch.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError

EPS = 1e-8
EVAL_POLICIES = ("argmax", "sample", "soft")


class GateModule(nn.Module):
    """Squeeze (global average pool) -> fc1 -> ReLU -> fc2 -> softmax.

    ``fc2`` is zero-initialized so every gate starts undecided at (0.5, 0.5).
    """

    def __init__(self, c, tau=1.0, hidden=None):
        super().__init__()
        if tau <= 0:
            raise ConfigurationError(f"gate temperature must be > 0, got {tau}")
        self.c = c
        self.hidden = hidden if hidden is not None else max(c // 16, 4)
        self.tau = float(tau)
        self.fc1 = nn.Linear(c, self.hidden)
        self.fc2 = nn.Linear(self.hidden, 2)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def logits(self, features):
        if features.dim() != 4 or features.shape[1] != self.c:
            raise InputError(f"gate expects (batch, {self.c}, h, w) features, got {tuple(features.shape)}")
        pooled = F.adaptive_avg_pool2d(features, 1).flatten(1)
        return self.fc2(F.relu(self.fc1(pooled)))

    def forward(self, features):
        return torch.softmax(self.logits(features), dim=1)

    def param_count(self):
        return sum(p.numel() for p in self.parameters())

    def macs(self):
        return self.c * self.hidden + self.hidden * 2


def gate_probs(gate: GateModule, features):
    return gate(features)


def sample_gumbel(shape, rng, dtype=torch.float32):
    """Standard Gumbel noise ``-log(-log(u))`` with ``u ~ U(0, 1)``."""
    if rng is None:
        raise InputError("Gumbel sampling needs an explicit torch.Generator")
    u = torch.rand(shape, generator=rng, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    u = u.clamp(min=tiny, max=1.0 - torch.finfo(dtype).eps)
    return -torch.log(-torch.log(u))


def _log_probs(probs):
    return torch.log(probs.clamp(EPS, 1.0 - EPS))


def gumbel_max(probs, g):
    """Hard decision ``argmax_k(log p_k + g_k)``; exact ties go to index 0."""
    scores = _log_probs(probs) + g
    return (scores[:, 1] > scores[:, 0]).to(probs.dtype)


def sample_gumbel_max(probs, rng):
    g = sample_gumbel(probs.shape, rng, probs.dtype)
    return gumbel_max(probs.detach(), g)


def gumbel_softmax(probs, g, tau=1.0):
    """Relaxed one-hot ``softmax((log p + g) / tau)``; differentiable in p and tau."""
    if (torch.is_tensor(tau) and bool((tau <= 0).any())) or (not torch.is_tensor(tau) and tau <= 0):
        raise ConfigurationError(f"temperature must be > 0, got {tau}")
    return torch.softmax((_log_probs(probs) + g) / tau, dim=1)


class _StraightThrough(torch.autograd.Function):
    """Forward returns the hard value exactly; backward routes to the soft one."""

    @staticmethod
    def forward(ctx, hard, soft):
        return hard.clone()

    @staticmethod
    def backward(ctx, grad):
        return None, grad


def straight_through(hard, soft):
    return _StraightThrough.apply(hard, soft)


@dataclass
class GateDecision:
    value: torch.Tensor  # per-sample multiplier applied to the adapter output
    hard: torch.Tensor  # {0, 1} per sample
    soft: torch.Tensor  # (b, 2) relaxed probabilities
    probs: torch.Tensor  # (b, 2) gate distribution, kept for reporting


def straight_through_decision(gate, features, mode="train", rng=None, eval_policy="argmax", relaxed=False):
    """Gate decision for a batch.

    train: Gumbel-Max sample in the forward pass, Gumbel-Softmax gradient in
    the backward pass (``relaxed=True`` uses the soft value in both passes).
    eval: ``eval_policy`` picks argmax (deterministic), a Gumbel-Max sample,
    or the soft activation probability.
    """
    probs = gate(features)
    if mode == "train":
        g = sample_gumbel(probs.shape, rng, probs.dtype)
        soft = gumbel_softmax(probs, g, gate.tau)
        hard = gumbel_max(probs.detach(), g)
        value = soft[:, 1] if relaxed else straight_through(hard, soft[:, 1])
        return GateDecision(value, hard, soft, probs)
    if mode != "eval":
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if eval_policy == "argmax":
        hard = (probs[:, 1] > probs[:, 0]).to(probs.dtype)
        return GateDecision(hard, hard, probs, probs)
    if eval_policy == "sample":
        hard = sample_gumbel_max(probs, rng)
        return GateDecision(hard, hard, probs, probs)
    if eval_policy == "soft":
        hard = (probs[:, 1] > probs[:, 0]).to(probs.dtype)
        return GateDecision(probs[:, 1], hard, probs, probs)
    raise ConfigurationError(f"eval_policy must be one of {EVAL_POLICIES}, got {eval_policy!r}")

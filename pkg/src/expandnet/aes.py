"""Adaptively expandable structures and the per-task registry.

An :class:`AESBlock` wraps one adapter and its gate at one backbone tap:
``F = H + G(D(H)) * D(H)``. The adapted feature ``F`` replaces ``H`` as the
input of the next backbone block. A :class:`TaskEntry` holds one block per
tap plus a linear head (global average pool of the last tap, then a linear
layer). Only the task being trained is mutable; frozen tasks never change.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._utils import log, module_hash
from .adapter import build_adapter
from .backbone import FrozenBackbone
from .errors import ConfigurationError, InputError, StateError, TaskLookupError
from .gate import GateDecision, GateModule, straight_through_decision

GATE_MODES = ("learned", "on", "off")


class _Freezable(nn.Module):
    frozen = False

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        for m in self.modules():
            if isinstance(m, _Freezable):
                m.frozen = True
        super().train(False)

    def train(self, mode=True):
        return super().train(False if self.frozen else mode)


class AESBlock(_Freezable):
    def __init__(self, c, layer_index, task_index, tau=1.0, variant="feature", outer_relu=True,
                 gate_mode="learned"):
        super().__init__()
        if gate_mode not in GATE_MODES:
            raise ConfigurationError(f"gate_mode must be one of {GATE_MODES}")
        self.c = c
        self.layer_index = layer_index
        self.task_index = task_index
        self.gate_mode = gate_mode
        self.adapter = build_adapter(c, variant, outer_relu)
        self.gate = GateModule(c, tau)
        if gate_mode == "on":
            self.gate.requires_grad_(False)
        self.pruned = gate_mode == "off"

    def decide(self, d, mode="eval", rng=None, eval_policy="argmax", relaxed=False) -> GateDecision:
        if self.gate_mode == "on":
            ones = torch.ones(d.shape[0], dtype=d.dtype)
            pair = torch.stack([1 - ones, ones], dim=1)
            return GateDecision(ones, ones, pair, pair)
        return straight_through_decision(self.gate, d, mode, rng, eval_policy, relaxed)

    def forward(self, h, mode="eval", rng=None, eval_policy="argmax", relaxed=False, trace=None):
        if h.dim() != 4 or h.shape[1] != self.c:
            raise InputError(f"AES block {self.layer_index} expects {self.c} channels, got {tuple(h.shape)}")
        if self.pruned:
            if trace is not None:
                trace.append(None)
            return h
        d = self.adapter(h)
        decision = self.decide(d, mode, rng, eval_policy, relaxed)
        if trace is not None:
            trace.append(decision)
        return h + decision.value.to(h.dtype).view(-1, 1, 1, 1) * d

    def trainable_parameters(self):
        if self.pruned or self.frozen:
            return []
        params = list(self.adapter.parameters())
        if self.gate_mode == "learned":
            params += list(self.gate.parameters())
        return params

    def param_count(self, include_pruned=False):
        if self.pruned and not include_pruned:
            return 0
        n = self.adapter.param_count().total
        if self.gate_mode == "learned":
            n += self.gate.param_count()
        return n

    def macs(self, h, w, include_pruned=False):
        if self.pruned and not include_pruned:
            return 0
        n = self.adapter.macs(h, w)
        if self.gate_mode == "learned":
            n += self.gate.macs()
        return n


def aes_forward(block: AESBlock, h, mode="eval", rng=None, eval_policy="argmax"):
    was = block.training
    block.train(mode == "train")
    try:
        return block(h, mode, rng, eval_policy)
    finally:
        block.train(was)


class TaskEntry(_Freezable):
    def __init__(self, task_id, widths, num_classes, tau=1.0, variant="feature", outer_relu=True,
                 gate_mode="learned", classes=None):
        super().__init__()
        self.task_id = task_id
        self.num_classes = int(num_classes)
        self.classes = list(classes) if classes is not None else None
        self.variant = variant
        self.outer_relu = outer_relu
        self.gate_mode = gate_mode
        self.tau = tau
        self.blocks = nn.ModuleList(
            AESBlock(c, j, task_id, tau, variant, outer_relu, gate_mode) for j, c in enumerate(widths)
        )
        self.head = nn.Linear(widths[-1], self.num_classes)
        self.trained = False
        self.prune_report = None
        self.metrics = None

    def forward(self, backbone, x, mode="eval", rng=None, eval_policy="argmax", relaxed=False, trace=None):
        def hook(k, h):
            return self.blocks[k](h, mode, rng, eval_policy, relaxed, trace)

        feats = backbone.forward_taps(x, hook)
        return self.head(F.adaptive_avg_pool2d(feats[-1], 1).flatten(1))

    def trainable_parameters(self):
        if self.frozen:
            return []
        params = []
        for block in self.blocks:
            params += block.trainable_parameters()
        return params + list(self.head.parameters())

    def kept_layers(self):
        return [b.layer_index for b in self.blocks if not b.pruned]

    def param_hash(self):
        return module_hash(self)


class TaskRegistry:
    """Ordered collection of tasks sharing one frozen backbone."""

    def __init__(self, backbone: FrozenBackbone):
        self.backbone = backbone
        self.tasks: dict[int, TaskEntry] = {}

    def __contains__(self, task_id):
        return task_id in self.tasks

    def __len__(self):
        return len(self.tasks)

    def task(self, task_id) -> TaskEntry:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise TaskLookupError(f"unknown task id {task_id!r}; valid ids: {sorted(self.tasks)}") from None

    @property
    def current(self) -> Optional[int]:
        open_tasks = [t for t, e in self.tasks.items() if not e.frozen]
        return open_tasks[0] if open_tasks else None

    def add_task(self, num_classes, tau=1.0, variant="feature", outer_relu=True, gate_mode="learned",
                 classes=None) -> int:
        if self.current is not None:
            raise StateError(f"task {self.current} is still unfrozen; freeze it before adding a new task")
        task_id = max(self.tasks) + 1 if self.tasks else 0
        self.tasks[task_id] = TaskEntry(task_id, self.backbone.channel_widths, num_classes, tau, variant,
                                        outer_relu, gate_mode, classes)
        return task_id

    def attach(self, entry: TaskEntry):
        """Register an already-built (typically loaded and frozen) task."""
        if entry.task_id in self.tasks:
            raise StateError(f"task {entry.task_id} already registered")
        if not entry.frozen and self.current is not None:
            raise StateError("only one task may be unfrozen")
        self.tasks[entry.task_id] = entry
        return entry.task_id

    def forward(self, task_id, x, mode="eval", rng=None, eval_policy="argmax", relaxed=False, trace=None):
        entry = self.task(task_id)
        entry.train(mode == "train")
        return entry(self.backbone, x, mode, rng, eval_policy, relaxed, trace)

    def freeze_task(self, task_id):
        entry = self.task(task_id)
        if entry.frozen:
            return
        if not entry.trained:
            log.warning("freezing task %s which was never trained", task_id)
        entry.freeze()


def add_task(reg: TaskRegistry, num_classes, **kwargs) -> int:
    return reg.add_task(num_classes, **kwargs)


def task_forward(reg: TaskRegistry, task_id, x, mode="eval", rng=None, eval_policy="argmax"):
    return reg.forward(task_id, x, mode, rng, eval_policy)


def freeze_task(reg: TaskRegistry, task_id):
    reg.freeze_task(task_id)

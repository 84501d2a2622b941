"""Per-task lifecycle: train, prune never-activated adapters, freeze, account.

``run_sequence`` drives a whole stream and re-evaluates every earlier task
after each new one, so forgetting (there should be none) is measured rather
than assumed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._utils import log, make_generator
from .aes import TaskRegistry
from .adapter import ADAPTER_VARIANTS
from .data import TaskDataset, TaskStream, batches
from .errors import ConfigurationError, InputError, PruneEquivalenceError, StateError, TrainingDivergenceError
from .gate import EVAL_POLICIES
from .regularizers import (
    RegConfig,
    LayerStats,
    activation_loss,
    activation_ratio,
    adaptive_lambda,
    sparsity_loss,
    sparsity_ratio,
)

HIGH_SPARSITY = 0.10


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 0.002
    step_size: int = 10
    gamma: float = 0.1
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer must be 'adam' or 'sgd', got {self.name!r}")
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be > 0")
        if self.step_size < 1 or not 0 < self.gamma <= 1 or self.weight_decay < 0:
            raise ConfigurationError("invalid learning-rate schedule or weight decay")


@dataclass
class AdapterConfig:
    variant: str = "feature"
    outer_relu: bool = True

    def __post_init__(self):
        if self.variant not in ADAPTER_VARIANTS:
            raise ConfigurationError(f"adapter variant must be one of {sorted(ADAPTER_VARIANTS)}")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    tau: float = 1.0
    seed: int = 0
    eval_policy: str = "argmax"
    gate_mode: str = "learned"
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    hflip: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if not self.tau > 0:
            raise ConfigurationError("tau must be > 0")
        if self.eval_policy not in EVAL_POLICIES:
            raise ConfigurationError(f"eval_policy must be one of {EVAL_POLICIES}")
        if self.gate_mode not in ("learned", "on", "off"):
            raise ConfigurationError("gate_mode must be 'learned', 'on' or 'off'")


@dataclass
class PruneReport:
    activation_ratios: list
    verdicts: list
    kept_count: int
    added_params_before: int
    added_params_after: int
    added_macs_before: int
    added_macs_after: int


@dataclass
class MetricsRecord:
    task_id: int
    accuracy: float  # test top-1 at freeze time
    val_accuracy: float
    average_accuracy: float  # over all tasks learned so far
    added_params: int
    added_macs: int
    n_a: int
    r_s: float
    sparsity_ratios: list = field(default_factory=list)
    activation_ratios: list = field(default_factory=list)

    @property
    def added_params_m(self):
        return self.added_params / 1e6

    @property
    def added_macs_m(self):
        return self.added_macs / 1e6


@dataclass
class SequenceReport:
    records: list
    accuracy_matrix: list  # row t: test accuracy of tasks 0..t after learning task t
    activation_matrix: list  # task x layer validation activation ratio (0 where pruned)

    @property
    def average_accuracy(self):
        return float(np.mean([r.accuracy for r in self.records])) if self.records else float("nan")

    @property
    def total_added_params(self):
        return int(sum(r.added_params for r in self.records))

    @property
    def mean_added_macs(self):
        return float(np.mean([r.added_macs for r in self.records])) if self.records else float("nan")


# --- accounting --------------------------------------------------------------

def count_added_params(reg: TaskRegistry, task_id, pruned_only=True) -> int:
    """Parameters added for one task: kept (or all) adapters, gates and the head."""
    entry = reg.task(task_id)
    n = sum(b.param_count(include_pruned=not pruned_only) for b in entry.blocks)
    return n + sum(p.numel() for p in entry.head.parameters())


def count_macs(reg: TaskRegistry, task_id, input_shape=None, pruned_only=True) -> int:
    """Multiply-adds added on top of the backbone for one input sample."""
    if input_shape is not None and tuple(input_shape) != reg.backbone.input_shape:
        raise InputError(f"backbone takes inputs of shape {reg.backbone.input_shape}, not {tuple(input_shape)}")
    entry = reg.task(task_id)
    shapes = reg.backbone.tap_shapes()
    n = sum(b.macs(h, w, include_pruned=not pruned_only) for b, (_, h, w) in zip(entry.blocks, shapes))
    return n + entry.head.in_features * entry.head.out_features


def backbone_macs(backbone, input_shape=None) -> int:
    """Shared baseline cost: conv and linear multiply-adds of the backbone."""
    total = 0

    def conv_hook(mod, inp, out):
        nonlocal total
        kh, kw = mod.kernel_size
        total += out[0].numel() * (mod.in_channels // mod.groups) * kh * kw

    def linear_hook(mod, inp, out):
        nonlocal total
        total += mod.in_features * mod.out_features

    handles = []
    for m in backbone.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    try:
        was = backbone.training
        backbone.eval()
        with torch.no_grad():
            backbone.forward_taps(torch.zeros((1,) + tuple(input_shape or backbone.input_shape)))
        backbone.train(was)
    finally:
        for h in handles:
            h.remove()
    return total


# --- evaluation ---------------------------------------------------------------

@torch.no_grad()
def predict(reg: TaskRegistry, task_id, x, eval_policy="argmax", batch_size=256, rng=None, with_activations=False):
    """Eval-mode logits over ``x`` in fixed-order batches.

    With ``with_activations`` also returns per-layer counts of hard
    activations (``None`` for pruned layers).
    """
    outs = []
    counts = None
    for start in range(0, len(x), batch_size):
        trace = [] if with_activations else None
        outs.append(reg.forward(task_id, x[start:start + batch_size], "eval", rng, eval_policy, trace=trace))
        if with_activations:
            step = [None if d is None else int(d.hard.sum()) for d in trace]
            counts = step if counts is None else [None if a is None else a + b for a, b in zip(counts, step)]
    logits = torch.cat(outs) if outs else torch.zeros(0, reg.task(task_id).num_classes)
    return (logits, counts) if with_activations else logits


def evaluate(reg: TaskRegistry, task_id, dataset: TaskDataset, partition="test", eval_policy="argmax",
             batch_size=256, rng=None) -> float:
    """Top-1 accuracy on one partition of a task dataset."""
    reg.task(task_id)
    x, y = dataset.partition(partition)
    if len(y) == 0:
        raise InputError(f"partition {partition!r} is empty")
    logits = predict(reg, task_id, x, eval_policy, batch_size, rng)
    return int((logits.argmax(1) == y).sum()) / len(y)


# --- training -------------------------------------------------------------------

def _param_groups(entry, weight_decay):
    conv, norm, rest = [], [], []
    for block in entry.blocks:
        if block.pruned:
            continue
        conv_ids = {id(w) for w in block.adapter.group_weights()}
        for p in block.adapter.parameters():
            (conv if id(p) in conv_ids else norm).append(p)
        if block.gate_mode == "learned":
            rest += list(block.gate.parameters())
    rest += list(entry.head.parameters())
    groups = [{"params": rest, "weight_decay": weight_decay}]
    if conv:
        groups.append({"params": conv, "weight_decay": 0.0})
    if norm:
        groups.append({"params": norm, "weight_decay": 0.0})
    return groups


def _make_optimizer(groups, cfg: OptimizerConfig):
    if cfg.name == "adam":
        return torch.optim.Adam(groups, lr=cfg.lr)
    return torch.optim.SGD(groups, lr=cfg.lr, momentum=0.9)


def learn_task(reg: TaskRegistry, task_id, dataset: TaskDataset, cfg: TrainConfig, history=None):
    """Optimize one task's adapters, gates and head; does not prune or freeze.

    Loss = cross-entropy + per-layer weighted group lasso + lambda_a times the
    activation term. In adaptive mode the first period uses the uniform
    weight 0.5 (what the normalization gives when no gradients have been seen
    yet) while gradient magnitudes are collected; the per-layer weights are
    then recomputed every ``reg.recompute_period`` epochs from the
    gradients of the preceding period.
    """
    entry = reg.task(task_id)
    if not reg.backbone.frozen:
        raise StateError("backbone must be frozen before learning tasks")
    if entry.frozen:
        raise StateError(f"task {task_id} is frozen")
    earlier_open = [t for t, e in reg.tasks.items() if t != task_id and not e.frozen]
    if earlier_open:
        raise StateError(f"tasks {earlier_open} are still unfrozen")

    rc = cfg.reg
    blocks = [b for b in entry.blocks if not b.pruned]
    gated = [b for b in blocks if b.gate_mode == "learned"]
    n_layers = len(blocks)
    adaptive = rc.lambda_s_mode == "adaptive"
    lambdas = adaptive_lambda(np.zeros(n_layers)) if adaptive else np.full(n_layers, rc.lambda_s_constant)
    grad_acc = np.zeros(n_layers)

    opt = _make_optimizer(_param_groups(entry, cfg.optimizer.weight_decay), cfg.optimizer)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.optimizer.step_size, cfg.optimizer.gamma)
    rng = make_generator(cfg.seed * 1_000_003 + task_id)
    x_train, _ = dataset.partition("train")
    step = 0

    for epoch in range(cfg.epochs):
        sums = {"ce": 0.0, "sparse": 0.0, "active": 0.0, "total": 0.0}
        ra_sum = np.zeros(n_layers)
        n_batches = 0
        for xb, yb in batches(dataset, "train", cfg.batch_size, cfg.seed, epoch, hflip=cfg.hflip):
            if len(xb) < 2:
                continue  # batch-norm needs two samples in training mode
            trace = []
            logits = reg.forward(task_id, xb, "train", rng, trace=trace)
            ce = F.cross_entropy(logits, yb)
            decisions = [d for d in trace if d is not None]

            if adaptive and n_layers:
                weights = [w for b in blocks for w in b.adapter.group_weights()]
                grads = torch.autograd.grad(ce, weights, retain_graph=True, allow_unused=True)
                k = 0
                for j, b in enumerate(blocks):
                    n_w = len(b.adapter.group_weights())
                    grad_acc[j] += sum(float(g.abs().sum()) for g in grads[k:k + n_w] if g is not None)
                    k += n_w

            sparse = sparsity_loss([b.adapter for b in blocks], lambdas) if n_layers else torch.zeros(())
            active = torch.zeros(())
            ra = [activation_ratio(d.value) for d in decisions]
            if gated:
                rs = [sparsity_ratio(b.adapter, rc.sigma_threshold) for b in gated]
                ra_gated = [r for b, r in zip(blocks, ra) if b.gate_mode == "learned"]
                active = activation_loss(rs, ra_gated)
            loss = ce + sparse + rc.lambda_a * active

            if not torch.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite loss at task {task_id} epoch {epoch} step {step}", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            step += 1
            n_batches += 1
            sums["ce"] += ce.item()
            sums["sparse"] += float(sparse.detach())
            sums["active"] += float(torch.as_tensor(active).detach())
            sums["total"] += loss.item()
            ra_sum += np.array([float(r.detach()) for r in ra]) if ra else 0.0
        sched.step()

        period_grads = grad_acc.copy()
        if adaptive and n_layers and (epoch + 1) % rc.recompute_period == 0:
            lambdas = adaptive_lambda(grad_acc)
            grad_acc[:] = 0.0
        if history is not None and n_batches:
            history.append({
                "kind": "epoch", "task": task_id, "epoch": epoch,
                **{k: v / n_batches for k, v in sums.items()},
                "lr": opt.param_groups[0]["lr"],
            })
            for j, b in enumerate(blocks):
                stats = LayerStats(
                    sparsity_ratio=sparsity_ratio(b.adapter, rc.sigma_threshold),
                    activation_ratio=float(ra_sum[j] / n_batches),
                    grad_magnitude_sum=float(period_grads[j]),
                    lambda_s_prime=float(lambdas[j]),
                )
                history.append({"kind": "layer", "task": task_id, "epoch": epoch, "layer": b.layer_index,
                                **asdict(stats)})
        if n_batches:
            log.info("task %d epoch %d: ce=%.4f sparse=%.4f active=%.4f", task_id, epoch,
                     sums["ce"] / n_batches, sums["sparse"] / n_batches, sums["active"] / n_batches)

    entry.trained = True
    _, counts = predict(reg, task_id, dataset.x_val, cfg.eval_policy, cfg.eval_batch_size, with_activations=True)
    if counts is None:
        counts = [None] * len(entry.blocks)
    n_val = max(len(dataset.y_val), 1)
    return MetricsRecord(
        task_id=task_id,
        accuracy=float("nan"),
        val_accuracy=evaluate(reg, task_id, dataset, "val", cfg.eval_policy, cfg.eval_batch_size)
        if len(dataset.y_val) else float("nan"),
        average_accuracy=float("nan"),
        added_params=count_added_params(reg, task_id),
        added_macs=count_macs(reg, task_id),
        n_a=sum(1 for c in counts if c),
        r_s=_high_sparsity_ratio(entry, rc.sigma_threshold),
        sparsity_ratios=[sparsity_ratio(b.adapter, rc.sigma_threshold) for b in entry.blocks],
        activation_ratios=[0.0 if c is None else c / n_val for c in counts],
    )


def _high_sparsity_ratio(entry, sigma):
    ratios = [sparsity_ratio(b.adapter, sigma) for b in entry.blocks]
    return sum(r > HIGH_SPARSITY for r in ratios) / len(ratios)


def prune_task(reg: TaskRegistry, task_id, dataset: TaskDataset, eval_policy="argmax", batch_size=256) -> PruneReport:
    """Prune every layer whose gate never fires on the whole validation set.

    Pruned layers become exact identities, so validation logits must be
    bit-identical before and after; this is checked, not assumed.
    """
    entry = reg.task(task_id)
    if entry.frozen:
        raise StateError(f"task {task_id} is frozen and cannot be pruned")
    x_val, _ = dataset.partition("val")
    if len(x_val) == 0:
        raise InputError("pruning needs a non-empty validation set")
    before, counts = predict(reg, task_id, x_val, eval_policy, batch_size, with_activations=True)
    ratios = [0.0 if c is None else c / len(x_val) for c in counts]
    params_before = count_added_params(reg, task_id)
    macs_before = count_macs(reg, task_id)
    verdicts = []
    for block, r in zip(entry.blocks, ratios):
        if r == 0.0:
            block.pruned = True
            verdicts.append("prune")
        else:
            verdicts.append("keep")
    after = predict(reg, task_id, x_val, eval_policy, batch_size)
    if not torch.equal(before, after):
        raise PruneEquivalenceError(f"task {task_id}: validation logits changed after pruning")
    report = PruneReport(
        activation_ratios=ratios,
        verdicts=verdicts,
        kept_count=verdicts.count("keep"),
        added_params_before=params_before,
        added_params_after=count_added_params(reg, task_id),
        added_macs_before=macs_before,
        added_macs_after=count_macs(reg, task_id),
    )
    entry.prune_report = report
    return report


def run_sequence(reg: TaskRegistry, stream: TaskStream, cfg: TrainConfig, history=None,
                 on_task_done: Optional[Callable] = None) -> SequenceReport:
    """add -> learn -> prune -> freeze -> re-evaluate earlier tasks, for every task.

    Tasks already present in ``reg`` (frozen, e.g. loaded when resuming) are
    not retrained; their stored metrics are reused.
    """
    if not reg.backbone.frozen:
        raise StateError("backbone must be frozen before learning tasks")
    records, acc_matrix, act_matrix = [], [], []
    for k, ds in enumerate(stream.tasks):
        if k in reg and reg.task(k).frozen and reg.task(k).metrics is not None:
            record = reg.task(k).metrics
        else:
            if k in reg:
                raise StateError(f"task {k} exists but is not a completed, frozen task")
            torch.manual_seed(cfg.seed * 7919 + k)
            tid = reg.add_task(ds.num_classes, tau=cfg.tau, variant=cfg.adapter.variant,
                               outer_relu=cfg.adapter.outer_relu, gate_mode=cfg.gate_mode, classes=ds.classes)
            assert tid == k
            pre = learn_task(reg, tid, ds, cfg, history)
            report = prune_task(reg, tid, ds, "argmax", cfg.eval_batch_size)
            reg.freeze_task(tid)
            entry = reg.task(tid)
            record = MetricsRecord(
                task_id=tid,
                accuracy=evaluate(reg, tid, ds, "test", cfg.eval_policy, cfg.eval_batch_size),
                val_accuracy=evaluate(reg, tid, ds, "val", cfg.eval_policy, cfg.eval_batch_size),
                average_accuracy=float("nan"),
                added_params=count_added_params(reg, tid),
                added_macs=count_macs(reg, tid),
                n_a=report.kept_count,
                r_s=pre.r_s,
                sparsity_ratios=pre.sparsity_ratios,
                activation_ratios=report.activation_ratios,
            )
            entry.metrics = record
            log.info("task %d: test acc %.4f, kept %d/%d AES, +%d params", tid, record.accuracy,
                     record.n_a, len(entry.blocks), record.added_params)
        records.append(record)
        row = [evaluate(reg, t, stream.tasks[t], "test", cfg.eval_policy, cfg.eval_batch_size) for t in range(k + 1)]
        acc_matrix.append(row)
        record.average_accuracy = float(np.mean(row))
        act_matrix.append([
            0.0 if b.pruned else r for b, r in zip(reg.task(k).blocks, record.activation_ratios)
        ])
        if on_task_done is not None:
            on_task_done(k, record)
    return SequenceReport(records, acc_matrix, act_matrix)


def frozen_feature_config(cfg: TrainConfig) -> TrainConfig:
    """Same recipe with every AES removed: only the linear heads learn."""
    from dataclasses import replace

    return replace(cfg, gate_mode="off", reg=replace(cfg.reg, lambda_a=0.0, lambda_s_mode="constant",
                                                       lambda_s_constant=0.0))

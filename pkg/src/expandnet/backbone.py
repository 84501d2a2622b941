"""Frozen, task-shared feature extractor and its on-disk checkpoint.

A backbone is an optional ``stem`` followed by an ordered list of blocks.
Outputs of the blocks listed in ``tap_points`` are exposed to the per-task
adapted structures; :meth:`FrozenBackbone.forward_taps` accepts a hook that
may replace each tapped feature before it flows into the next block.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from ._utils import file_sha256, log
from .errors import ConfigurationError, CorruptionError, InputError

CHECKPOINT_FORMAT = "expandnet-backbone/1"
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.safetensors"


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple = (3, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (channels, height, width), got {self.input_shape}")


class FrozenBackbone(nn.Module):
    def __init__(self, arch: ArchSpec, stem: nn.Module, blocks, tap_points, channel_widths):
        super().__init__()
        tap_points = [int(t) for t in tap_points]
        if not tap_points or any(b <= a for a, b in zip(tap_points, tap_points[1:])):
            raise ConfigurationError(f"tap_points must be non-empty and strictly increasing: {tap_points}")
        self.arch = arch
        self.stem = stem
        self.blocks = nn.ModuleList(blocks)
        if tap_points[-1] >= len(self.blocks):
            raise ConfigurationError("tap point beyond last block")
        self.tap_points = tap_points
        self.channel_widths = [int(c) for c in channel_widths]
        self.frozen = False
        self._tap_shapes = None

    @property
    def input_shape(self):
        return self.arch.input_shape

    def freeze(self):
        """Make weights and normalization statistics immutable.

        Normalization layers run with their running statistics from now on,
        whatever mode the caller later requests.
        """
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.frozen = True
        super().train(False)
        return self

    def train(self, mode=True):
        return super().train(False if self.frozen else mode)

    def _check_input(self, x):
        if x.dim() != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise InputError(
                f"expected input of shape (batch, {', '.join(map(str, self.input_shape))}), got {tuple(x.shape)}"
            )

    def forward_taps(self, x, hook=None):
        """Run the blocks; return the (possibly hooked) feature at every tap.

        ``hook(k, feature)`` is called for the k-th tap point and its return
        value replaces the feature for the remaining blocks.
        """
        self._check_input(x)
        taps = set(self.tap_points)
        order = {j: k for k, j in enumerate(self.tap_points)}
        feats = []
        h = self.stem(x)
        for j, block in enumerate(self.blocks):
            h = block(h)
            if j in taps:
                if hook is not None:
                    h = hook(order[j], h)
                feats.append(h)
            if j == self.tap_points[-1]:
                break
        return feats

    def forward(self, x):
        return self.forward_taps(x)

    def tap_shapes(self):
        """(c, h, w) of every tap feature for a single input sample."""
        if self._tap_shapes is None:
            was_training = self.training
            super().train(False)
            with torch.no_grad():
                probe = torch.zeros((1,) + self.input_shape, dtype=next(self.parameters()).dtype)
                self._tap_shapes = [tuple(f.shape[1:]) for f in self.forward_taps(probe)]
            super().train(was_training and not self.frozen)
        return self._tap_shapes


def _smallnet_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=False),
        nn.MaxPool2d(2),
    )


def _build_smallnet(arch):
    widths = (16, 32, 64)
    cin = arch.input_shape[0]
    blocks = []
    for w in widths:
        blocks.append(_smallnet_block(cin, w))
        cin = w
    return FrozenBackbone(arch, nn.Identity(), blocks, [0, 1, 2], widths)


def _build_resnet18(arch):
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    if arch.input_shape[0] != 3:
        net.conv1 = nn.Conv2d(arch.input_shape[0], 64, 7, stride=2, padding=3, bias=False)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    blocks = [*net.layer1, *net.layer2, *net.layer3, *net.layer4]
    widths = [b.conv2.out_channels for b in blocks]
    return FrozenBackbone(arch, stem, blocks, list(range(len(blocks))), widths)


ARCHITECTURES = {
    "smallnet-3x32": _build_smallnet,
    "resnet18": _build_resnet18,
}


def build_backbone(arch_spec, input_shape=None) -> FrozenBackbone:
    """Construct an (unfrozen) backbone from a registered architecture name."""
    if isinstance(arch_spec, str):
        arch_spec = ArchSpec(arch_spec) if input_shape is None else ArchSpec(arch_spec, input_shape)
    if arch_spec.name not in ARCHITECTURES:
        raise ConfigurationError(
            f"unknown architecture {arch_spec.name!r}; registered: {sorted(ARCHITECTURES)}"
        )
    return ARCHITECTURES[arch_spec.name](arch_spec)


def freeze(backbone: FrozenBackbone) -> FrozenBackbone:
    return backbone.freeze()


def backbone_forward(backbone: FrozenBackbone, x):
    return backbone.forward_taps(x)


def load_torchvision_resnet18(backbone: FrozenBackbone, state_dict):
    """Copy a torchvision ``resnet18`` state dict into a ``resnet18`` backbone.

    The classification layer (``fc.*``) is dropped.
    """
    stem_names = {"conv1": "stem.0", "bn1": "stem.1"}
    offsets = {"layer1": 0, "layer2": 2, "layer3": 4, "layer4": 6}
    mapped = {}
    for name, value in state_dict.items():
        head, _, rest = name.partition(".")
        if head in stem_names:
            mapped[f"{stem_names[head]}.{rest}"] = value
        elif head in offsets:
            idx, _, rest = rest.partition(".")
            mapped[f"blocks.{offsets[head] + int(idx)}.{rest}"] = value
    backbone.load_state_dict(mapped, strict=True)
    return backbone


def pretrain_backbone(backbone, x, y, num_classes, epochs=5, lr=2e-3, batch_size=64, seed=0):
    """Plain cross-entropy training with a throwaway linear head.

    Returns the training accuracy of the final epoch. The head is discarded.
    """
    from .data import iterate_minibatches

    torch.manual_seed(seed)
    head = nn.Linear(backbone.channel_widths[-1], num_classes)
    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=lr, weight_decay=1e-4)
    backbone.train()
    acc = 0.0
    for epoch in range(epochs):
        correct = 0
        for xb, yb in iterate_minibatches(x, y, batch_size, seed=seed, epoch=epoch):
            if len(xb) < 2:
                continue
            feat = backbone.forward_taps(xb)[-1]
            logits = head(F.adaptive_avg_pool2d(feat, 1).flatten(1))
            loss = F.cross_entropy(logits, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            correct += int((logits.argmax(1) == yb).sum())
        acc = correct / len(x)
        log.info("pretrain epoch %d: loss=%.4f train_acc=%.4f", epoch, loss.item(), acc)
    return acc


@dataclass
class BackboneCheckpoint:
    path: Path
    manifest: dict = field(default_factory=dict)

    @property
    def weights_path(self):
        return self.path / WEIGHTS_NAME


def save_checkpoint(backbone: FrozenBackbone, path, provenance="") -> BackboneCheckpoint:
    """Write ``path/manifest.json`` and ``path/weights.safetensors`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        tensors = {k: v.detach().contiguous().clone() for k, v in backbone.state_dict().items()}
        save_file(tensors, str(tmp / WEIGHTS_NAME))
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "architecture": backbone.arch.name,
            "input_shape": list(backbone.input_shape),
            "tap_points": backbone.tap_points,
            "channel_widths": backbone.channel_widths,
            "provenance": provenance,
            "arrays": sorted(tensors),
            "sha256": file_sha256(tmp / WEIGHTS_NAME),
        }
        (tmp / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return BackboneCheckpoint(path, manifest)


def read_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError as exc:
        raise CorruptionError(f"checkpoint manifest missing: {path / MANIFEST_NAME}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"checkpoint manifest unreadable: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorruptionError(f"unexpected checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(checkpoint) -> FrozenBackbone:
    """Rebuild and freeze a backbone, verifying hash and array inventory."""
    path = Path(checkpoint.path if isinstance(checkpoint, BackboneCheckpoint) else checkpoint)
    manifest = read_manifest(path)
    weights = path / WEIGHTS_NAME
    if not weights.exists():
        raise CorruptionError(f"checkpoint weights missing: {weights}")
    digest = file_sha256(weights)
    if digest != manifest.get("sha256"):
        raise CorruptionError(f"content hash mismatch for {weights}: manifest {manifest.get('sha256')}, file {digest}")
    try:
        tensors = load_file(str(weights))
    except (SafetensorError, OSError, ValueError) as exc:
        raise CorruptionError(f"cannot read {weights}: {exc}") from exc
    backbone = build_backbone(ArchSpec(manifest["architecture"], tuple(manifest["input_shape"])))
    expected = set(backbone.state_dict())
    if set(tensors) != expected or set(manifest.get("arrays", [])) != expected:
        missing = sorted(expected - set(tensors))
        raise CorruptionError(f"checkpoint arrays do not match architecture (missing: {missing[:5]})")
    backbone.load_state_dict(tensors, strict=True)
    if backbone.tap_points != manifest["tap_points"] or backbone.channel_widths != manifest["channel_widths"]:
        raise CorruptionError("manifest tap points / widths disagree with architecture")
    return backbone.freeze()

"""Self-contained per-task archives.

A task archive is a directory holding ``manifest.json`` and
``weights.safetensors``. Array names follow
``task{i}/layer{j}/adapter/<key>``, ``task{i}/layer{j}/gate/<key>`` and
``task{i}/head/<key>``; pruned layers store no arrays. The manifest records
the hash of the backbone the task was trained against, so a task can only be
hot-loaded onto the matching backbone.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from ._utils import file_sha256, module_hash, tensor_hash
from .aes import TaskEntry, TaskRegistry
from .backbone import FrozenBackbone
from .errors import CorruptionError, StateError
from .trainer import MetricsRecord, PruneReport

TASK_FORMAT = "expandnet-task/1"
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.safetensors"


def task_dir(run_dir, task_id) -> Path:
    return Path(run_dir) / "tasks" / f"task{task_id}"


def _clean(obj):
    # json has no NaN; store None instead
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def task_arrays(entry: TaskEntry) -> dict:
    """Named arrays of one task, kept layers only."""
    i = entry.task_id
    out = {}
    for block in entry.blocks:
        if block.pruned:
            continue
        j = block.layer_index
        for key, t in block.adapter.state_dict().items():
            out[f"task{i}/layer{j}/adapter/{key}"] = t
        for key, t in block.gate.state_dict().items():
            out[f"task{i}/layer{j}/gate/{key}"] = t
    for key, t in entry.head.state_dict().items():
        out[f"task{i}/head/{key}"] = t
    return {k: v.detach().contiguous().clone() for k, v in out.items()}


def save_task(entry: TaskEntry, backbone: FrozenBackbone, run_dir) -> Path:
    """Write a frozen task's archive atomically and return its directory."""
    if not entry.frozen:
        raise StateError(f"task {entry.task_id} must be frozen before it is archived")
    path = task_dir(run_dir, entry.task_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = task_arrays(entry)
    tmp = Path(tempfile.mkdtemp(prefix=".task-", dir=path.parent))
    try:
        save_file(arrays, str(tmp / WEIGHTS_NAME))
        manifest = {
            "format": TASK_FORMAT,
            "task_id": entry.task_id,
            "num_classes": entry.num_classes,
            "classes": entry.classes,
            "widths": [b.c for b in entry.blocks],
            "tau": entry.tau,
            "variant": entry.variant,
            "outer_relu": entry.outer_relu,
            "gate_mode": entry.gate_mode,
            "kept_layers": entry.kept_layers(),
            "prune_report": _clean(asdict(entry.prune_report)) if entry.prune_report else None,
            "metrics": _clean(asdict(entry.metrics)) if entry.metrics else None,
            "backbone_hash": module_hash(backbone),
            "arrays": sorted(arrays),
            "array_hash": tensor_hash(arrays),
            "sha256": file_sha256(tmp / WEIGHTS_NAME),
        }
        (tmp / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_task_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError as exc:
        raise CorruptionError(f"task manifest missing: {path / MANIFEST_NAME}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"task manifest unreadable: {exc}") from exc
    if manifest.get("format") != TASK_FORMAT:
        raise CorruptionError(f"unexpected task archive format {manifest.get('format')!r}")
    return manifest


def restore_metrics(d):
    if d is None:
        return None
    d = {k: (float("nan") if v is None and k in ("accuracy", "val_accuracy", "average_accuracy") else v)
         for k, v in d.items()}
    return MetricsRecord(**d)


def load_task(path, backbone: FrozenBackbone) -> TaskEntry:
    """Rebuild a frozen task from its archive, checking hashes and backbone match."""
    path = Path(path)
    manifest = read_task_manifest(path)
    weights = path / WEIGHTS_NAME
    if not weights.exists():
        raise CorruptionError(f"task weights missing: {weights}")
    digest = file_sha256(weights)
    if digest != manifest.get("sha256"):
        raise CorruptionError(f"content hash mismatch for {weights}")
    if manifest.get("backbone_hash") != module_hash(backbone):
        raise CorruptionError(f"task archive {path} was trained against a different backbone")
    try:
        arrays = load_file(str(weights))
    except (SafetensorError, OSError, ValueError) as exc:
        raise CorruptionError(f"cannot read {weights}: {exc}") from exc

    if list(manifest["widths"]) != list(backbone.channel_widths):
        raise CorruptionError("task widths do not match the backbone")
    entry = TaskEntry(manifest["task_id"], backbone.channel_widths, manifest["num_classes"], manifest["tau"],
                      manifest["variant"], manifest["outer_relu"], manifest["gate_mode"], manifest["classes"])
    kept = set(manifest["kept_layers"])
    for block in entry.blocks:
        block.pruned = block.layer_index not in kept
    expected = task_arrays(entry)
    if set(arrays) != set(expected) or set(manifest.get("arrays", [])) != set(expected):
        raise CorruptionError(f"task archive {path} arrays do not match its manifest")
    if tensor_hash(arrays) != manifest.get("array_hash"):
        raise CorruptionError(f"task archive {path} array hash mismatch")

    i = entry.task_id
    with torch.no_grad():
        for block in entry.blocks:
            if block.pruned:
                continue
            j = block.layer_index
            for prefix, module in (("adapter", block.adapter), ("gate", block.gate)):
                stem = f"task{i}/layer{j}/{prefix}/"
                module.load_state_dict({k[len(stem):]: v for k, v in arrays.items() if k.startswith(stem)})
        entry.head.load_state_dict({k.split("/")[-1]: v for k, v in arrays.items()
                                    if k.startswith(f"task{i}/head/")})
    if manifest.get("prune_report"):
        entry.prune_report = PruneReport(**manifest["prune_report"])
    entry.metrics = restore_metrics(manifest.get("metrics"))
    entry.trained = True
    entry.freeze()
    return entry


def saved_task_ids(run_dir) -> list:
    root = Path(run_dir) / "tasks"
    if not root.is_dir():
        return []
    ids = []
    for p in root.iterdir():
        if p.is_dir() and p.name.startswith("task") and p.name[4:].isdigit():
            ids.append(int(p.name[4:]))
    return sorted(ids)


def load_registry(run_dir, backbone: FrozenBackbone) -> TaskRegistry:
    """Registry with every archived task of a run, in task order.

    Loading stops at the first gap so a resumed run continues from there.
    """
    reg = TaskRegistry(backbone)
    for expected, tid in enumerate(saved_task_ids(run_dir)):
        if tid != expected:
            break
        reg.attach(load_task(task_dir(run_dir, tid), backbone))
    return reg

"""Run reports: CSV tables, the event log, a text table and the activation heat map.

Floats are written with ``repr`` so every value round-trips exactly.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

REPORT_COLUMNS = ["task", "accuracy", "val_accuracy", "added_params", "added_params_m", "added_macs",
                  "added_macs_m", "n_a", "r_s"]
GAP = ""


def _num(v):
    if v is None:
        return GAP
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v):
    if v == GAP:
        return None
    try:
        return int(v)
    except ValueError:
        return float(v)


def record_row(rec) -> dict:
    return {
        "task": rec.task_id,
        "accuracy": float(rec.accuracy),
        "val_accuracy": float(rec.val_accuracy),
        "added_params": int(rec.added_params),
        "added_params_m": rec.added_params / 1e6,
        "added_macs": int(rec.added_macs),
        "added_macs_m": rec.added_macs / 1e6,
        "n_a": int(rec.n_a),
        "r_s": float(rec.r_s),
    }


def average_row(rows) -> dict:
    """Mean accuracy, total added params, mean added MACs, total kept AES, mean r_s."""
    done = [r for r in rows if r.get("accuracy") is not None]
    if not done:
        return {"task": "average", **{c: None for c in REPORT_COLUMNS[1:]}}
    params = sum(r["added_params"] for r in done)
    macs = float(np.mean([r["added_macs"] for r in done]))
    return {
        "task": "average",
        "accuracy": float(np.mean([r["accuracy"] for r in done])),
        "val_accuracy": float(np.mean([r["val_accuracy"] for r in done])),
        "added_params": params,
        "added_params_m": params / 1e6,
        "added_macs": macs,
        "added_macs_m": macs / 1e6,
        "n_a": sum(r["n_a"] for r in done),
        "r_s": float(np.mean([r["r_s"] for r in done])),
    }


def report_rows(records, num_tasks=None) -> list:
    """Per-task rows plus the average row; missing tasks become explicit gaps."""
    by_id = {r.task_id: record_row(r) for r in records}
    n = num_tasks if num_tasks is not None else (max(by_id) + 1 if by_id else 0)
    rows = [by_id.get(t, {"task": t, **{c: None for c in REPORT_COLUMNS[1:]}}) for t in range(n)]
    return rows + [average_row(rows)]


def write_report_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_num(r[c]) for c in REPORT_COLUMNS])


def read_report_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        task = r["task"]
        out.append({"task": int(task) if task.isdigit() else task, **{c: _parse(r[c]) for c in REPORT_COLUMNS[1:]}})
    return out


def write_activations_csv(path, matrix, num_layers):
    """Task x layer validation activation ratios; pruned layers read 0."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task"] + [f"layer{j}" for j in range(num_layers)])
        for t, row in enumerate(matrix):
            w.writerow([t] + [_num(None if v is None else float(v)) for v in row])


def read_activations_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[np.nan if v == GAP else float(v) for v in r[1:]] for r in rows], dtype=np.float64)


def write_accuracy_matrix(path, matrix):
    """Row t: test accuracy of every task learned so far, measured after task t."""
    n = len(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["after_task"] + [f"task{t}" for t in range(n)])
        for t, row in enumerate(matrix):
            w.writerow([t] + [_num(float(v)) for v in row] + [GAP] * (n - len(row)))


def append_events(path, events):
    """Append JSON lines; loss components come from the trainer history."""
    with open(path, "a") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_events(path) -> list:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


LAYER_STATS_COLUMNS = ["task", "epoch", "layer", "sparsity_ratio", "activation_ratio", "grad_magnitude_sum",
                       "lambda_s_prime"]


def write_layer_stats(path, events):
    rows = [e for e in events if e.get("kind") == "layer"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LAYER_STATS_COLUMNS)
        for e in rows:
            w.writerow([_num(e[c]) for c in LAYER_STATS_COLUMNS])


def format_table(rows) -> str:
    """Fixed-width text table: accuracy (%), +params (M), +MACs (M), n_a, r_s."""
    header = ["task", "acc %", "+params M", "+MACs M", "n_a", "r_s"]
    lines = []
    for r in rows:
        if r["accuracy"] is None:
            lines.append([str(r["task"]), "-", "-", "-", "-", "-"])
            continue
        lines.append([
            str(r["task"]),
            f"{100 * r['accuracy']:.2f}",
            f"{r['added_params_m']:.4f}",
            f"{r['added_macs_m']:.4f}",
            str(r["n_a"]),
            f"{r['r_s']:.2f}",
        ])
    widths = [max(len(h), *(len(l[k]) for l in lines)) if lines else len(h) for k, h in enumerate(header)]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    out = [fmt.format(*header), "  ".join("-" * w for w in widths)]
    out += [fmt.format(*l) for l in lines]
    return "\n".join(out)


def plot_activations(matrix, path, title="gate activation (validation)"):
    """Heat map with one row per task and one column per tap point."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        m = m.reshape(len(m), -1)
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * max(m.shape[1], 1), 1.0 + 0.5 * max(m.shape[0], 1)))
    im = ax.imshow(np.nan_to_num(m, nan=0.0), vmin=0.0, vmax=1.0, cmap="Blues", aspect="auto")
    ax.set_xticks(range(m.shape[1]), [f"L{j}" for j in range(m.shape[1])])
    ax.set_yticks(range(m.shape[0]), [f"T{t}" for t in range(m.shape[0])])
    for t in range(m.shape[0]):
        for j in range(m.shape[1]):
            v = m[t, j]
            ax.text(j, t, "-" if math.isnan(v) else f"{v:.2f}", ha="center", va="center", fontsize=7,
                    color="white" if v > 0.6 else "black")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.05)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return m.shape

# %% [markdown]
# # Gated adapters on a frozen backbone
#
# A small tour on the synthetic blob stream: pretrain a backbone, learn two
# tasks, look at which adapters survive pruning, and check that old tasks do
# not move. Runs on CPU in well under a minute.
#
#     python notebooks/walkthrough.py

# %%
import dataclasses

import numpy as np
import torch

from expandnet import TaskRegistry, build_backbone, set_deterministic
from expandnet.backbone import pretrain_backbone
from expandnet.data import default_synthetic_spec, make_synthetic_stream
from expandnet.report import format_table, plot_activations, report_rows
from expandnet.trainer import TrainConfig, count_added_params, predict, run_sequence

set_deterministic(True)

# %% [markdown]
# The stream has a pretraining split and two tasks: a "clone" of the
# pretraining classes with swapped labels, and an XOR-style task the frozen
# features cannot separate linearly.

# %%
spec = dataclasses.replace(default_synthetic_spec(), train_per_class=150)
stream = make_synthetic_stream(spec, seed=0)
print([t.name for t in stream.tasks], stream.input_shape)

# %%
torch.manual_seed(0)
backbone = build_backbone("smallnet-3x32", input_shape=stream.input_shape)
acc = pretrain_backbone(backbone, stream.pretrain.x_train, stream.pretrain.y_train, 2, epochs=3)
backbone.freeze()
print("pretrain accuracy", acc, "tap widths", backbone.channel_widths)

# %% [markdown]
# Every task gets one adapter + gate per tap point and its own linear head.
# After training, layers whose gate never fires on the validation set are
# pruned, and the task is frozen.

# %%
reg = TaskRegistry(backbone)
at_freeze = {}


def remember(k, record):
    at_freeze[k] = predict(reg, k, stream.tasks[k].x_test)


seq = run_sequence(reg, stream, TrainConfig(epochs=8), on_task_done=remember)
rows = report_rows(seq.records, len(stream))
print(format_table(rows))

# %%
for t, entry in reg.tasks.items():
    print(f"task {t}: kept layers {entry.kept_layers()}, +{count_added_params(reg, t)} params")

# %% [markdown]
# Old tasks are untouched by later ones: every column of the accuracy matrix
# is constant once its task is frozen.

# %%
print(np.array([row + [np.nan] * (len(stream) - len(row)) for row in seq.accuracy_matrix]))
print("task 0 logits as at freeze time:", torch.equal(at_freeze[0], predict(reg, 0, stream.tasks[0].x_test)))

# %%
shape = plot_activations(np.array(seq.activation_matrix), "walkthrough_activations.png")
print("heat map", shape, "-> walkthrough_activations.png")

"""Task-incremental learning with gated feature adapters on a frozen backbone."""

from ._utils import set_deterministic
from .adapter import FeatureAdapter, adapter_forward, adapter_param_count, build_adapter, channel_plan
from .aes import AESBlock, TaskEntry, TaskRegistry, add_task, aes_forward, freeze_task, task_forward
from .artifacts import load_registry, load_task, save_task
from .backbone import (
    ArchSpec,
    FrozenBackbone,
    backbone_forward,
    build_backbone,
    freeze,
    load_checkpoint,
    save_checkpoint,
)
from .config import ExperimentConfig, load_config
from .data import TaskDataset, TaskStream, batches, make_split_stream, make_synthetic_stream
from .gate import GateDecision, GateModule, gate_probs, gumbel_softmax, sample_gumbel_max, straight_through_decision
from .regularizers import (
    LayerStats,
    RegConfig,
    activation_loss,
    activation_ratio,
    adaptive_lambda,
    sparsity_loss,
    sparsity_ratio,
    total_loss,
)
from .trainer import (
    MetricsRecord,
    PruneReport,
    TrainConfig,
    count_added_params,
    count_macs,
    evaluate,
    learn_task,
    prune_task,
    run_sequence,
)

__version__ = "0.1.0"

"""Command line front end: ``pretrain``, ``learn``, ``eval`` and ``report``.

Every command accepts ``--config PATH`` or ``--run-dir PATH``, ``--seed N``
and ``--deterministic {on,off}``. Failures exit nonzero after printing one
line ``error: <CODE>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import report as rep
from ._utils import log, make_generator, seed_everything, set_deterministic
from .artifacts import restore_metrics, load_registry, read_task_manifest, save_task, saved_task_ids, task_dir
from .backbone import ArchSpec, build_backbone, load_checkpoint, pretrain_backbone, read_manifest, save_checkpoint
from .config import ExperimentConfig, from_dict, load_config, snapshot, with_seed
from .data import PARTITIONS, make_split_stream, make_synthetic_stream
from .errors import ConfigurationError, ExpandNetError, StateError
from .trainer import evaluate, run_sequence

CONFIG_NAME = "config.json"
RUN_NAME = "run.json"
EVENTS_NAME = "events.log"


def build_stream(cfg: ExperimentConfig):
    s = cfg.stream
    if s.kind == "synthetic":
        return make_synthetic_stream(s.synthetic, seed=cfg.seed)
    return make_split_stream(s.dataset, s.classes_per_task, seed=cfg.seed, cache_dir=s.cache_dir,
                             pretrain_classes=s.pretrain_classes or None,
                             pretrain_fraction=s.pretrain_fraction if s.pretrain_classes else 0.0)


def _write_json(path, obj):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


# --- commands -----------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, overwrite=False) -> Path:
    """Train the backbone on the stream's pretrain split and write a frozen checkpoint."""
    path = cfg.checkpoint_path
    if path.exists() and not overwrite:
        raise StateError(f"checkpoint {path} already exists; pass --overwrite to replace it")
    stream = build_stream(cfg)
    if stream.pretrain is None:
        raise ConfigurationError("the stream defines no pretrain split (set stream.pretrain_classes)")
    seed_everything(cfg.seed)
    backbone = build_backbone(ArchSpec(cfg.backbone.arch, stream.input_shape))
    p = cfg.backbone.pretrain
    acc = pretrain_backbone(backbone, stream.pretrain.x_train, stream.pretrain.y_train, stream.pretrain.num_classes,
                            epochs=p.epochs, lr=p.lr, batch_size=p.batch_size, seed=cfg.seed)
    backbone.freeze()
    provenance = json.dumps({"stream": stream.descriptor, "pretrain": asdict(p), "seed": cfg.seed,
                             "train_accuracy": acc}, sort_keys=True)
    ckpt = save_checkpoint(backbone, path, provenance)
    print(f"checkpoint {ckpt.path} sha256 {ckpt.manifest['sha256']} train_accuracy {acc!r}")
    return ckpt.path


def _open_backbone(cfg: ExperimentConfig, expected_sha=None):
    path = cfg.checkpoint_path
    if not path.exists():
        raise StateError(f"backbone checkpoint {path} not found; run 'expandnet pretrain' first")
    if expected_sha is not None and read_manifest(path).get("sha256") != expected_sha:
        raise StateError(f"backbone checkpoint {path} differs from the one this run was trained on")
    return load_checkpoint(path)


def _write_reports(run_dir: Path, cfg: ExperimentConfig, seq, num_layers):
    rows = rep.report_rows(seq.records, len(seq.records))
    rep.write_report_csv(run_dir / "report.csv", rows)
    rep.write_activations_csv(run_dir / "activations.csv", seq.activation_matrix, num_layers)
    rep.write_accuracy_matrix(run_dir / "accuracy_matrix.csv", seq.accuracy_matrix)
    rep.write_layer_stats(run_dir / "layer_stats.csv", rep.read_events(run_dir / EVENTS_NAME))
    return rows


def cmd_learn(cfg: ExperimentConfig, resume=False) -> Path:
    """Run the whole task sequence into ``cfg.output_dir``.

    Without ``resume`` the run directory must not exist yet. With it, the
    stored config snapshot is used and archived tasks are loaded, not retrained.
    """
    run_dir = Path(cfg.output_dir)
    if resume:
        if not (run_dir / CONFIG_NAME).exists():
            raise StateError(f"nothing to resume in {run_dir}")
        cfg = from_dict(json.loads((run_dir / CONFIG_NAME).read_text()))
        cfg.output_dir = str(run_dir)
        run_info = json.loads((run_dir / RUN_NAME).read_text())
    else:
        if run_dir.exists() and any(p.name != "backbone" for p in run_dir.iterdir()):
            raise StateError(f"run directory {run_dir} already holds a run; use --resume to continue it")
        run_info = None

    backbone = _open_backbone(cfg, run_info["backbone_sha256"] if run_info else None)
    stream = build_stream(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    if run_info is None:
        _write_json(run_dir / CONFIG_NAME, snapshot(cfg))
        run_info = {
            "checkpoint": str(cfg.checkpoint_path.resolve()),
            "backbone_sha256": read_manifest(cfg.checkpoint_path)["sha256"],
            "num_tasks": len(stream),
            "tap_points": backbone.tap_points,
            "stream": stream.descriptor,
        }
    run_info["status"] = "running"
    _write_json(run_dir / RUN_NAME, run_info)

    reg = load_registry(run_dir, backbone)
    for tid in saved_task_ids(run_dir):
        if tid not in reg:
            # archive after a gap; it will be retrained
            shutil.rmtree(task_dir(run_dir, tid))
    if len(reg):
        log.info("resuming after %d archived task(s)", len(reg))
    history = []
    events = run_dir / EVENTS_NAME

    def on_task_done(k, record):
        if not task_dir(run_dir, k).exists():
            save_task(reg.task(k), backbone, run_dir)
            rep.append_events(events, [e for e in history if e["task"] == k])
            rep.append_events(events, [{"kind": "task", "task": k, **rep.record_row(record)}])
        history.clear()

    set_deterministic(cfg.deterministic)
    try:
        seq = run_sequence(reg, stream, cfg.train, history, on_task_done)
    except ExpandNetError as exc:
        failed = next((k for k in range(len(stream)) if not task_dir(run_dir, k).exists()), None)
        run_info.update(status="failed", failed_task=failed, error=f"{exc.code}: {exc}")
        _write_json(run_dir / RUN_NAME, run_info)
        rep.append_events(events, [{"kind": "error", "task": failed, "code": exc.code, "message": str(exc)}])
        raise
    rows = _write_reports(run_dir, cfg, seq, len(backbone.tap_points))
    run_info.update(status="complete", failed_task=None, error=None)
    _write_json(run_dir / RUN_NAME, run_info)
    print(rep.format_table(rows))
    return run_dir


def _open_run(run_dir: Path):
    if not (run_dir / CONFIG_NAME).exists() or not (run_dir / RUN_NAME).exists():
        raise StateError(f"{run_dir} is not a run directory (missing {CONFIG_NAME} or {RUN_NAME})")
    cfg = from_dict(json.loads((run_dir / CONFIG_NAME).read_text()))
    cfg.output_dir = str(run_dir)
    return cfg, json.loads((run_dir / RUN_NAME).read_text())


def cmd_eval(run_dir, task_id: int, split="test", seed=None) -> dict:
    """Re-evaluate one archived task; the result must equal the stored metric exactly."""
    run_dir = Path(run_dir)
    if split not in PARTITIONS:
        raise ConfigurationError(f"split must be one of {PARTITIONS}")
    cfg, run_info = _open_run(run_dir)
    backbone = _open_backbone(cfg, run_info["backbone_sha256"])
    reg = load_registry(run_dir, backbone)
    entry = reg.task(task_id)
    stream = build_stream(cfg)
    rng = make_generator(cfg.seed if seed is None else seed)
    acc = evaluate(reg, task_id, stream[task_id], split, cfg.train.eval_policy, cfg.train.eval_batch_size, rng)
    stored = None
    if entry.metrics is not None:
        stored = {"test": entry.metrics.accuracy, "val": entry.metrics.val_accuracy}.get(split)
    record = {"task": task_id, "split": split, "accuracy": acc, "n": len(stream[task_id].partition(split)[1]),
              "stored_accuracy": stored, "matches_stored": None if stored is None else acc == stored,
              "kept_layers": entry.kept_layers()}
    print(f"accuracy {acc!r}")
    print(json.dumps(record, sort_keys=True))
    return record


def cmd_report(run_dir, out_dir=None) -> dict:
    """Text table and activation heat map from the archived tasks; gaps for missing tasks."""
    run_dir = Path(run_dir)
    _, run_info = _open_run(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    n_tasks, n_layers = run_info["num_tasks"], len(run_info["tap_points"])
    records, matrix = [], np.full((n_tasks, n_layers), np.nan)
    for tid in saved_task_ids(run_dir):
        m = read_task_manifest(task_dir(run_dir, tid))
        if m.get("metrics") is None or tid >= n_tasks:
            continue
        rec = restore_metrics(m["metrics"])
        records.append(rec)
        kept = set(m["kept_layers"])
        matrix[tid] = [r if j in kept else 0.0 for j, r in enumerate(rec.activation_ratios)]
    rows = rep.report_rows(records, n_tasks)
    table = rep.format_table(rows)
    if len(records) < n_tasks:
        table += f"\n({n_tasks - len(records)} of {n_tasks} tasks missing; shown as '-')"
    (out_dir / "report.txt").write_text(table + "\n")
    shape = rep.plot_activations(matrix, out_dir / "activations.png")
    print(table)
    return {"rows": rows, "heatmap_shape": shape, "table": table}


# --- argument handling ------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: E_USAGE: {message}", file=sys.stderr)
        raise SystemExit(2)


def _common(p):
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--run-dir", type=Path, help="run directory (defaults to the config's output_dir)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--deterministic", choices=("on", "off"), default=None,
                   help="pinned-determinism mode (default: on)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="expandnet", description="Task-incremental learning with gated feature adapters.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    _common(p)
    p.add_argument("--overwrite", action="store_true", help="replace an existing checkpoint")
    p = sub.add_parser("learn", help="learn the task sequence")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue an interrupted run")
    p = sub.add_parser("eval", help="re-evaluate one archived task")
    _common(p)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--split", choices=PARTITIONS, default="test")
    p = sub.add_parser("report", help="render the report table and activation heat map")
    _common(p)
    p.add_argument("--out", type=Path, help="output directory (default: the run directory)")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
        if args.run_dir is not None:
            cfg.output_dir = str(args.run_dir)
    elif args.run_dir is not None and (args.run_dir / CONFIG_NAME).exists():
        cfg = from_dict(json.loads((args.run_dir / CONFIG_NAME).read_text()))
        cfg.output_dir = str(args.run_dir)
    else:
        raise ConfigurationError("give --config PATH (or --run-dir of an existing run)")
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.deterministic is not None:
        cfg.deterministic = args.deterministic == "on"
    return cfg


def _run_dir(args) -> Path:
    if args.run_dir is not None:
        return args.run_dir
    if args.config is not None:
        return Path(load_config(args.config).output_dir)
    raise ConfigurationError("give --run-dir PATH or --config PATH")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("eval", "report"):
            set_deterministic(args.deterministic != "off")
            if args.command == "eval":
                cmd_eval(_run_dir(args), args.task, args.split, args.seed)
            else:
                cmd_report(_run_dir(args), args.out)
            return 0
        cfg = _resolve_config(args)
        set_deterministic(cfg.deterministic)
        if args.command == "pretrain":
            cmd_pretrain(cfg, args.overwrite)
        else:
            cmd_learn(cfg, args.resume)
        return 0
    except ExpandNetError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {exc.code}: {msg}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("error: E_INTERRUPTED: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())

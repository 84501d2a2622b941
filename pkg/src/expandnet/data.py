"""Sequential task streams.

Split benchmarks cut a labelled image dataset into tasks of consecutive
classes with local labels ``0..k-1``. Synthetic streams render Gaussian blobs
into small images, which gives tasks with controllable similarity to the
pretraining distribution.

Everything here is a pure function of (descriptor, seed).
"""

from __future__ import annotations

import gzip
import os
import pickle
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError, DatasetMissingError, InputError

PARTITIONS = ("train", "val", "test")
VAL_FRACTION = 0.1


def default_cache_dir():
    return Path(os.environ.get("EXPANDNET_DATA", Path.home() / ".cache" / "expandnet" / "datasets"))


@dataclass
class RawDataset:
    x_train: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    mean: tuple
    std: tuple


def _read_idx(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        data = fh.read()
    ndim = data[3]
    dims = [int.from_bytes(data[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _find(root, stem):
    for suffix in ("", ".gz"):
        p = root / (stem + suffix)
        if p.exists():
            return p
    return None


def _load_mnist(cache_dir):
    npz = cache_dir / "mnist.npz"
    if npz.exists():
        with np.load(npz) as f:
            xtr, ytr, xte, yte = f["x_train"], f["y_train"], f["x_test"], f["y_test"]
    else:
        raw = cache_dir / "MNIST" / "raw"
        files = [_find(raw, s) for s in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                         "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
        if any(f is None for f in files):
            raise DatasetMissingError(
                f"MNIST not found: expected {npz} (x_train/y_train/x_test/y_test) or IDX files under {raw}"
            )
        xtr, ytr, xte, yte = (_read_idx(f) for f in files)
    return RawDataset(
        (xtr.reshape(-1, 1, 28, 28) / 255.0).astype(np.float32), ytr.astype(np.int64),
        (xte.reshape(-1, 1, 28, 28) / 255.0).astype(np.float32), yte.astype(np.int64),
        10, (0.1307,), (0.3081,),
    )


def _load_mnist_5k(cache_dir):
    """The 5000-sample MNIST subset shipped inside ``mlxtend``.

    It has no official test partition; 100 images per class (fixed
    permutation, seed 0) are set aside as the test partition.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise DatasetMissingError("dataset 'mnist-5k' is read from the mlxtend package; install mlxtend") from exc
    x, y = mnist_data()
    x = (x.reshape(-1, 1, 28, 28) / 255.0).astype(np.float32)
    y = y.astype(np.int64)
    rng = np.random.default_rng(0)
    test_idx = []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        test_idx.extend(rng.permutation(idx)[:100])
    test = np.zeros(len(y), dtype=bool)
    test[np.asarray(test_idx)] = True
    return RawDataset(x[~test], y[~test], x[test], y[test], 10, (0.1307,), (0.3081,))


def _load_cifar10(cache_dir):
    root = cache_dir / "cifar-10-batches-py"
    names = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
    if not all((root / n).exists() for n in names):
        raise DatasetMissingError(f"CIFAR-10 not found: expected python batches under {root}")

    def read(name):
        with open(root / name, "rb") as fh:
            d = pickle.load(fh, encoding="bytes")
        return np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32), np.asarray(d[b"labels"])

    parts = [read(n) for n in names[:5]]
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = read("test_batch")
    return RawDataset(
        (xtr / 255.0).astype(np.float32), ytr.astype(np.int64),
        (xte / 255.0).astype(np.float32), yte.astype(np.int64),
        10, (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616),
    )


DATASETS = {
    "mnist": _load_mnist,
    "mnist-5k": _load_mnist_5k,
    "cifar10": _load_cifar10,
}
# known before loading, so a bad split is rejected without touching the cache
DATASET_CLASSES = {"mnist": 10, "mnist-5k": 10, "cifar10": 10}


def load_raw(name, cache_dir=None) -> RawDataset:
    if name not in DATASETS:
        raise ConfigurationError(f"unknown dataset {name!r}; registered: {sorted(DATASETS)}")
    return DATASETS[name](Path(cache_dir) if cache_dir else default_cache_dir())


@dataclass
class TaskDataset:
    name: str
    classes: list
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_val: torch.Tensor
    y_val: torch.Tensor
    x_test: torch.Tensor
    y_test: torch.Tensor

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def label_map(self):
        return {g: k for k, g in enumerate(self.classes)}

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    def partition(self, name):
        if name not in PARTITIONS:
            raise InputError(f"unknown partition {name!r}; expected one of {PARTITIONS}")
        return getattr(self, f"x_{name}"), getattr(self, f"y_{name}")


@dataclass
class TaskStream:
    tasks: list
    seed: int
    descriptor: dict
    pretrain: Optional[TaskDataset] = None

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    @property
    def input_shape(self):
        return self.tasks[0].input_shape


def _normalize(x, mean, std):
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return torch.from_numpy(np.ascontiguousarray((x - mean) / std, dtype=np.float32))


def _stratified_split(y, fraction, rng):
    """Boolean mask selecting ``round(fraction * n_c)`` samples of every class."""
    mask = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        k = int(round(fraction * len(idx)))
        mask[rng.permutation(idx)[:k]] = True
    return mask


def _remap(y, classes):
    lut = {g: k for k, g in enumerate(classes)}
    return torch.as_tensor([lut[int(v)] for v in y], dtype=torch.int64)


def _make_task(name, classes, x, y, x_test, y_test, rng, mean, std):
    sel = np.isin(y, classes)
    xs, ys = x[sel], y[sel]
    val = _stratified_split(ys, VAL_FRACTION, rng)
    tsel = np.isin(y_test, classes)
    return TaskDataset(
        name, list(classes),
        _normalize(xs[~val], mean, std), _remap(ys[~val], classes),
        _normalize(xs[val], mean, std), _remap(ys[val], classes),
        _normalize(x_test[tsel], mean, std), _remap(y_test[tsel], classes),
    )


def make_split_stream(dataset_name, classes_per_task, seed=0, cache_dir=None, pretrain_classes=None,
                      pretrain_fraction=0.0) -> TaskStream:
    """Consecutive-class task stream.

    With ``pretrain_classes`` set, ``pretrain_fraction`` of their training
    images (stratified) is held out as a backbone pretraining split and
    removed from the task partitions.
    """
    if classes_per_task < 1:
        raise ConfigurationError("classes_per_task must be >= 1")
    if dataset_name not in DATASETS:
        raise ConfigurationError(f"unknown dataset {dataset_name!r}; registered: {sorted(DATASETS)}")
    if not 0.0 <= pretrain_fraction < 1.0:
        raise ConfigurationError("pretrain_fraction must lie in [0, 1)")
    n_classes = DATASET_CLASSES[dataset_name]
    if n_classes % classes_per_task:
        raise ConfigurationError(
            f"{dataset_name} has {n_classes} classes, not divisible by {classes_per_task} per task"
        )
    raw = load_raw(dataset_name, cache_dir)
    rng = np.random.default_rng(seed)
    x, y = raw.x_train, raw.y_train
    pretrain = None
    if pretrain_classes:
        pretrain_classes = sorted(int(c) for c in pretrain_classes)
        if any(c < 0 or c >= raw.num_classes for c in pretrain_classes):
            raise ConfigurationError("pretrain_classes out of range")
        if pretrain_fraction <= 0:
            raise ConfigurationError("pretrain_classes given but pretrain_fraction is 0")
        candidates = np.isin(y, pretrain_classes)
        held = np.zeros(len(y), dtype=bool)
        held[np.flatnonzero(candidates)[_stratified_split(y[candidates], pretrain_fraction, rng)]] = True
        pretrain = _make_task(f"{dataset_name}/pretrain", pretrain_classes, x[held], y[held],
                              raw.x_test[:0], raw.y_test[:0], rng, raw.mean, raw.std)
        x, y = x[~held], y[~held]
    tasks = []
    for k in range(raw.num_classes // classes_per_task):
        classes = list(range(k * classes_per_task, (k + 1) * classes_per_task))
        tasks.append(_make_task(f"{dataset_name}/task{k}", classes, x, y, raw.x_test, raw.y_test, rng,
                                raw.mean, raw.std))
    descriptor = {
        "kind": "split",
        "dataset": dataset_name,
        "classes_per_task": classes_per_task,
        "seed": seed,
        "pretrain_classes": pretrain_classes or [],
        "pretrain_fraction": pretrain_fraction,
        "val_fraction": VAL_FRACTION,
        "normalization": {"mean": list(raw.mean), "std": list(raw.std)},
    }
    return TaskStream(tasks, seed, descriptor, pretrain)


# --- synthetic blobs -------------------------------------------------------

@dataclass
class BlobMode:
    center: tuple
    sigma: tuple = (2.0, 2.0)
    amplitude: float = 1.0
    channel: int = 0


@dataclass
class SyntheticSpec:
    """Classes are mixtures of Gaussian blobs; a sample renders one mode.

    ``tasks`` entries are either ``{"kind": "clone"}`` (pretraining classes,
    fresh draws, reversed labels) or ``{"kind": "blobs", "classes": [...]}``
    where each class is a list of :class:`BlobMode` dicts.
    """

    image_size: int = 16
    channels: int = 1
    train_per_class: int = 300
    val_per_class: int = 50
    test_per_class: int = 100
    noise: float = 0.05
    jitter: float = 1.0
    pretrain: list = field(default_factory=list)
    tasks: list = field(default_factory=list)


def default_synthetic_spec():
    """Pretraining on left-vs-right blobs; a clone task and a diagonal (XOR) task."""
    left = [{"center": (4.0, 8.0)}]
    right = [{"center": (12.0, 8.0)}]
    diag = [{"center": (4.0, 4.0)}, {"center": (12.0, 12.0)}]
    anti = [{"center": (12.0, 4.0)}, {"center": (4.0, 12.0)}]
    return SyntheticSpec(
        pretrain=[left, right],
        tasks=[{"kind": "clone"}, {"kind": "blobs", "classes": [diag, anti]}],
    )


def _parse_class(modes, spec):
    if not isinstance(modes, (list, tuple)) or not modes:
        raise ConfigurationError("a synthetic class must be a non-empty list of blob modes")
    out = []
    for m in modes:
        if isinstance(m, BlobMode):
            m = asdict(m)
        if not isinstance(m, dict) or "center" not in m:
            raise ConfigurationError(f"malformed blob mode {m!r}")
        unknown = set(m) - {"center", "sigma", "amplitude", "channel"}
        if unknown:
            raise ConfigurationError(f"unknown blob mode keys {sorted(unknown)}")
        mode = BlobMode(tuple(float(v) for v in m["center"]), tuple(float(v) for v in m.get("sigma", (2.0, 2.0))),
                        float(m.get("amplitude", 1.0)), int(m.get("channel", 0)))
        if len(mode.center) != 2 or len(mode.sigma) != 2 or min(mode.sigma) <= 0:
            raise ConfigurationError(f"malformed blob mode {m!r}")
        if not 0 <= mode.channel < spec.channels:
            raise ConfigurationError(f"blob channel {mode.channel} out of range")
        out.append(mode)
    return out


def _render(modes, n, spec, rng):
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    x = np.zeros((n, spec.channels, s, s), dtype=np.float64)
    which = rng.integers(0, len(modes), size=n)
    shift = rng.uniform(-spec.jitter, spec.jitter, size=(n, 2))
    for i in range(n):
        m = modes[which[i]]
        cx, cy = m.center[0] + shift[i, 0], m.center[1] + shift[i, 1]
        blob = np.exp(-((xx - cx) ** 2) / (2 * m.sigma[0] ** 2) - ((yy - cy) ** 2) / (2 * m.sigma[1] ** 2))
        x[i, m.channel] += m.amplitude * blob
    x += rng.normal(0.0, spec.noise, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def _synthetic_task(name, classes, spec, rng):
    parts = {}
    for part, n in (("train", spec.train_per_class), ("val", spec.val_per_class), ("test", spec.test_per_class)):
        xs = [_render(modes, n, spec, rng) for modes in classes]
        ys = [np.full(n, k, dtype=np.int64) for k in range(len(classes))]
        parts[part] = (torch.from_numpy(np.concatenate(xs)), torch.from_numpy(np.concatenate(ys)))
    return TaskDataset(name, list(range(len(classes))), *parts["train"], *parts["val"], *parts["test"])


def make_synthetic_stream(spec=None, seed=0) -> TaskStream:
    """A dict spec overrides fields of the built-in clone/XOR stream."""
    if spec is None:
        spec = default_synthetic_spec()
    elif isinstance(spec, dict):
        unknown = set(spec) - set(SyntheticSpec.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown synthetic spec keys {sorted(unknown)}")
        spec = replace(default_synthetic_spec(), **spec)
    if spec.image_size < 4 or spec.channels < 1 or spec.noise < 0 or spec.jitter < 0:
        raise ConfigurationError("malformed synthetic spec")
    if min(spec.train_per_class, spec.val_per_class, spec.test_per_class) < 1:
        raise ConfigurationError("every synthetic partition needs at least one sample per class")
    if len(spec.pretrain) < 2:
        raise ConfigurationError("synthetic spec needs at least two pretraining classes")
    pre_classes = [_parse_class(c, spec) for c in spec.pretrain]
    rng = np.random.default_rng(seed)
    pretrain = _synthetic_task("synthetic/pretrain", pre_classes, spec, rng)
    tasks = []
    for k, t in enumerate(spec.tasks):
        if not isinstance(t, dict) or t.get("kind") not in ("clone", "blobs"):
            raise ConfigurationError(f"malformed synthetic task {t!r}")
        if t["kind"] == "clone":
            classes = list(reversed(pre_classes))
        else:
            classes = [_parse_class(c, spec) for c in t.get("classes", [])]
            if len(classes) < 2:
                raise ConfigurationError("a synthetic task needs at least two classes")
        tasks.append(_synthetic_task(f"synthetic/task{k}-{t['kind']}", classes, spec, rng))
    descriptor = {
        "kind": "synthetic",
        "spec": _jsonable(asdict(spec)),
        "seed": seed,
        "normalization": {"mean": [0.0] * spec.channels, "std": [1.0] * spec.channels},
    }
    return TaskStream(tasks, seed, descriptor, pretrain)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def stream_from_descriptor(descriptor, cache_dir=None) -> TaskStream:
    """Rebuild a stream from the descriptor stored with a run."""
    kind = descriptor.get("kind")
    if kind == "split":
        return make_split_stream(descriptor["dataset"], descriptor["classes_per_task"], descriptor["seed"],
                                 cache_dir, descriptor.get("pretrain_classes") or None,
                                 descriptor.get("pretrain_fraction", 0.0))
    if kind == "synthetic":
        return make_synthetic_stream(dict(descriptor["spec"]), descriptor["seed"])
    raise ConfigurationError(f"unknown stream kind {kind!r}")


# --- batching ----------------------------------------------------------------

def iterate_minibatches(x, y, batch_size, seed=0, epoch=0, shuffle=True, hflip=False):
    """Yield ``(x, y)`` batches; order is a pure function of (seed, epoch).

    The final partial batch is included.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    n = len(x)
    rng = np.random.default_rng([int(seed), int(epoch)])
    order = rng.permutation(n) if shuffle else np.arange(n)
    flips = rng.random(n) < 0.5 if hflip else None
    for start in range(0, n, batch_size):
        idx = torch.from_numpy(order[start:start + batch_size])
        xb = x[idx]
        if flips is not None:
            f = torch.from_numpy(flips[order[start:start + batch_size]])
            xb = torch.where(f.view(-1, 1, 1, 1), xb.flip(-1), xb)
        yield xb, y[idx]


def batches(ds: TaskDataset, partition, batch_size, seed=0, epoch=0, shuffle=True, hflip=False):
    x, y = ds.partition(partition)
    return iterate_minibatches(x, y, batch_size, seed, epoch, shuffle, hflip)

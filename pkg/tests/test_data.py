import gzip

import numpy as np
import pytest
import torch

from expandnet.data import (
    batches,
    iterate_minibatches,
    make_split_stream,
    make_synthetic_stream,
    stream_from_descriptor,
)
from expandnet.errors import ConfigurationError, DatasetMissingError, InputError


@pytest.fixture(scope="module")
def mnist5k():
    return make_split_stream("mnist-5k", 2, seed=0, pretrain_classes=[0, 1], pretrain_fraction=0.5)


def test_consecutive_split(mnist5k):
    assert [t.classes for t in mnist5k.tasks] == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
    for t in mnist5k.tasks:
        for part in ("train", "val", "test"):
            _, y = t.partition(part)
            assert set(y.tolist()) <= {0, 1}
        assert t.label_map == {t.classes[0]: 0, t.classes[1]: 1}


def test_val_fraction_and_disjoint(mnist5k):
    t = mnist5k.tasks[2]
    n = len(t.y_train) + len(t.y_val)
    assert abs(len(t.y_val) / n - 0.1) < 0.01
    # partitions never share an image
    rows = lambda x: {hash(r.numpy().tobytes()) for r in x}
    assert not rows(t.x_train) & rows(t.x_val)
    assert not rows(t.x_train) & rows(t.x_test)


def test_pretrain_split_held_out(mnist5k):
    pre = mnist5k.pretrain
    assert pre is not None and pre.classes == [0, 1]
    rows = lambda x: {hash(r.numpy().tobytes()) for r in x}
    t0 = mnist5k.tasks[0]
    assert not rows(pre.x_train) & rows(t0.x_train)
    assert not rows(pre.x_train) & rows(t0.x_test)


def test_indivisible_split():
    with pytest.raises(ConfigurationError):
        make_split_stream("cifar10", 3)
    with pytest.raises(ConfigurationError):
        make_split_stream("imagenet", 2)


def test_missing_cache_names_path(tmp_path):
    with pytest.raises(DatasetMissingError, match=str(tmp_path)):
        make_split_stream("mnist", 2, cache_dir=tmp_path)
    with pytest.raises(DatasetMissingError, match="cifar-10-batches-py"):
        make_split_stream("cifar10", 2, cache_dir=tmp_path)


def _write_idx(path, arr):
    header = bytes([0, 0, 8, arr.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in arr.shape)
    with gzip.open(path, "wb") as fh:
        fh.write(header + arr.astype(np.uint8).tobytes())


def test_mnist_idx_loader(tmp_path):
    rng = np.random.default_rng(0)
    raw = tmp_path / "MNIST" / "raw"
    raw.mkdir(parents=True)
    ytr = np.repeat(np.arange(10), 20)
    yte = np.repeat(np.arange(10), 5)
    _write_idx(raw / "train-images-idx3-ubyte.gz", rng.integers(0, 255, (200, 28, 28)))
    _write_idx(raw / "train-labels-idx1-ubyte.gz", ytr)
    _write_idx(raw / "t10k-images-idx3-ubyte.gz", rng.integers(0, 255, (50, 28, 28)))
    _write_idx(raw / "t10k-labels-idx1-ubyte.gz", yte)
    s = make_split_stream("mnist", 2, cache_dir=tmp_path)
    assert len(s) == 5 and s.input_shape == (1, 28, 28)
    assert len(s.tasks[0].y_test) == 10 and len(s.tasks[0].y_val) == 4


def test_split_determinism(mnist5k):
    again = make_split_stream("mnist-5k", 2, seed=0, pretrain_classes=[0, 1], pretrain_fraction=0.5)
    for a, b in zip(mnist5k.tasks, again.tasks):
        assert torch.equal(a.x_train, b.x_train) and torch.equal(a.y_val, b.y_val)
    rebuilt = stream_from_descriptor(mnist5k.descriptor)
    assert torch.equal(rebuilt.tasks[4].x_val, mnist5k.tasks[4].x_val)


def test_synthetic_determinism_and_clone():
    a, b = make_synthetic_stream(seed=3), make_synthetic_stream(seed=3)
    for ta, tb in zip(a.tasks, b.tasks):
        assert ta.x_train.numpy().tobytes() == tb.x_train.numpy().tobytes()
    assert "clone" in a.tasks[0].name
    # clone inputs come from the pretraining distribution: class means agree
    pre, clone = a.pretrain, a.tasks[0]
    for k in range(2):
        m_pre = pre.x_train[pre.y_train == k].mean(0)
        m_clone = clone.x_train[clone.y_train == 1 - k].mean(0)
        assert float((m_pre - m_clone).abs().max()) < 0.05


def test_synthetic_tasks_linearly_separable():
    from sklearn.linear_model import LogisticRegression

    s = make_synthetic_stream(seed=0)
    for t in s.tasks:
        probe = LogisticRegression(max_iter=2000).fit(t.x_train.flatten(1).numpy(), t.y_train.numpy())
        assert probe.score(t.x_test.flatten(1).numpy(), t.y_test.numpy()) > 0.95


def test_synthetic_malformed():
    with pytest.raises(ConfigurationError):
        make_synthetic_stream({"pretrain": [[{"center": (1, 1)}]]})
    with pytest.raises(ConfigurationError):
        make_synthetic_stream({"bogus": 1})
    with pytest.raises(ConfigurationError):
        make_synthetic_stream({"pretrain": [[{"center": (1, 1)}], [{"centre": (2, 2)}]]})


def test_batches_sizes_and_order():
    x = torch.arange(10).float().view(10, 1, 1, 1)
    y = torch.arange(10)
    sizes = [len(yb) for _, yb in iterate_minibatches(x, y, 4, seed=1, epoch=0)]
    assert sizes == [4, 4, 2]
    run = lambda e: torch.cat([yb for _, yb in iterate_minibatches(x, y, 4, seed=1, epoch=e)])
    assert torch.equal(run(0), run(0))
    assert not torch.equal(run(0), run(1))
    assert sorted(run(1).tolist()) == list(range(10))
    with pytest.raises(ConfigurationError):
        list(iterate_minibatches(x, y, 0))


def test_batches_partition_lookup(mnist5k):
    with pytest.raises(InputError):
        batches(mnist5k.tasks[0], "holdout", 8)

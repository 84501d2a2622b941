import hashlib
import logging
import os
import random

import numpy as np
import torch

log = logging.getLogger("expandnet")


def tensor_hash(named_tensors):
    """sha256 over (name, dtype, shape, raw bytes) in name order."""
    h = hashlib.sha256()
    for name in sorted(named_tensors):
        t = named_tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_hash(module):
    """Hash of every parameter and buffer of ``module``."""
    return tensor_hash(dict(module.state_dict()))


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def set_deterministic(on=True):
    """Pinned-determinism mode: one thread, deterministic kernels."""
    if on:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    else:
        torch.use_deterministic_algorithms(False)


def make_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g

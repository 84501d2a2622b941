import json

import pytest
import torch

from expandnet.backbone import (
    ArchSpec,
    backbone_forward,
    build_backbone,
    freeze,
    load_checkpoint,
    load_torchvision_resnet18,
    read_manifest,
    save_checkpoint,
)
from expandnet.errors import ConfigurationError, CorruptionError, InputError


@pytest.fixture
def smallnet():
    torch.manual_seed(0)
    return freeze(build_backbone("smallnet-3x32"))


def test_smallnet_descriptor(smallnet):
    assert smallnet.tap_points == [0, 1, 2]
    assert smallnet.channel_widths == [16, 32, 64]
    feats = backbone_forward(smallnet, torch.randn(8, 3, 32, 32))
    assert [f.shape[1] for f in feats] == [16, 32, 64]
    assert smallnet.tap_shapes() == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]


def test_zero_input_finite(smallnet):
    feats = backbone_forward(smallnet, torch.zeros(2, 3, 32, 32))
    assert all(bool(torch.isfinite(f).all()) for f in feats)


def test_frozen_is_immutable(smallnet):
    x = torch.randn(4, 3, 32, 32)
    a = backbone_forward(smallnet, x)
    smallnet.train()
    assert not smallnet.training
    assert not any(p.requires_grad for p in smallnet.parameters())
    b = backbone_forward(smallnet, x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_input_checks(smallnet):
    with pytest.raises(InputError):
        backbone_forward(smallnet, torch.zeros(2, 1, 32, 32))
    with pytest.raises(ConfigurationError):
        build_backbone("vgg-nope")


def test_hook_replaces_features(smallnet):
    x = torch.randn(2, 3, 32, 32)
    plain = backbone_forward(smallnet, x)
    seen = []

    def hook(k, h):
        seen.append(k)
        return torch.zeros_like(h) if k == 0 else h

    out = smallnet.forward_taps(x, hook)
    assert seen == [0, 1, 2]
    assert torch.equal(out[0], torch.zeros_like(plain[0]))
    assert not torch.equal(out[1], plain[1])


def test_custom_input_shape():
    bb = build_backbone(ArchSpec("smallnet-3x32", (1, 28, 28)))
    assert bb.tap_shapes() == [(16, 14, 14), (32, 7, 7), (64, 3, 3)]


def test_checkpoint_round_trip(smallnet, tmp_path):
    x = torch.randn(3, 3, 32, 32)
    ckpt = save_checkpoint(smallnet, tmp_path / "ck", provenance="unit")
    loaded = load_checkpoint(ckpt)
    assert all(torch.equal(a, b) for a, b in zip(backbone_forward(smallnet, x), backbone_forward(loaded, x)))
    m = read_manifest(tmp_path / "ck")
    assert m["tap_points"] == [0, 1, 2] and m["channel_widths"] == [16, 32, 64]
    assert m["provenance"] == "unit"


def test_truncated_archive(smallnet, tmp_path):
    save_checkpoint(smallnet, tmp_path / "ck")
    w = tmp_path / "ck" / "weights.safetensors"
    w.write_bytes(w.read_bytes()[:100])
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "ck")


def test_manifest_hash_mismatch(smallnet, tmp_path):
    save_checkpoint(smallnet, tmp_path / "ck")
    mpath = tmp_path / "ck" / "manifest.json"
    m = json.loads(mpath.read_text())
    m["sha256"] = "0" * 64
    mpath.write_text(json.dumps(m))
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "ck")


def test_missing_arrays(smallnet, tmp_path):
    from safetensors.torch import load_file, save_file
    from expandnet._utils import file_sha256

    save_checkpoint(smallnet, tmp_path / "ck")
    w = tmp_path / "ck" / "weights.safetensors"
    tensors = load_file(str(w))
    tensors.pop(sorted(tensors)[0])
    save_file(tensors, str(w))
    mpath = tmp_path / "ck" / "manifest.json"
    m = json.loads(mpath.read_text())
    m["sha256"] = file_sha256(w)
    mpath.write_text(json.dumps(m))
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "ck")


def test_resnet18_registered_and_weights_map():
    import torchvision

    torch.manual_seed(0)
    ref = torchvision.models.resnet18(weights=None).eval()
    bb = build_backbone("resnet18")
    assert bb.channel_widths == [64, 64, 128, 128, 256, 256, 512, 512]
    assert len(bb.tap_points) == 8
    load_torchvision_resnet18(bb, ref.state_dict())
    bb.freeze()
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        h = ref.maxpool(ref.relu(ref.bn1(ref.conv1(x))))
        h = ref.layer4(ref.layer3(ref.layer2(ref.layer1(h))))
    assert torch.equal(backbone_forward(bb, x)[-1], h)

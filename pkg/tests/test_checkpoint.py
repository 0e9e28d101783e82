import json
import struct

import pytest
import torch

from gridlm.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    file_digest,
    group_digests,
    load_checkpoint,
    read_header,
    save_checkpoint,
)
from gridlm.errors import CheckpointError
from gridlm.model import GROUP_NAMES, init_params


@pytest.fixture()
def saved(tiny_config, tmp_path):
    model = init_params(tiny_config, 13)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, {"note": "fixture", "baseline_heldout_t2t_acc": 0.5}, path,
                    frozen=["backbone", "base_embed"])
    return model, path


def test_roundtrip_bit_exact(saved, tiny_config):
    model, path = saved
    loaded, header = load_checkpoint(path)
    assert loaded.config.to_dict() == tiny_config.to_dict()
    orig = dict(model.named_parameters())
    for name, p in loaded.named_parameters():
        assert torch.equal(p, orig[name]), name
    assert header["meta"]["baseline_heldout_t2t_acc"] == 0.5
    assert header["frozen"] == ["backbone", "base_embed"]
    assert header["format_version"] == FORMAT_VERSION


def test_group_digests_survive_roundtrip(saved):
    model, path = saved
    loaded, _ = load_checkpoint(path)
    assert group_digests(model) == group_digests(loaded)
    assert set(group_digests(model)) == set(GROUP_NAMES)


def test_save_is_deterministic(saved, tmp_path):
    model, path = saved
    again = tmp_path / "again.ckpt"
    save_checkpoint(model, {"note": "fixture", "baseline_heldout_t2t_acc": 0.5}, again,
                    frozen=["backbone", "base_embed"])
    assert file_digest(path) == file_digest(again)


def test_digest_tracks_content(saved, tmp_path):
    model, path = saved
    with torch.no_grad():
        model.base_embed[0, 0] += 1.0
    other = tmp_path / "other.ckpt"
    save_checkpoint(model, {"note": "fixture", "baseline_heldout_t2t_acc": 0.5}, other,
                    frozen=["backbone", "base_embed"])
    assert file_digest(path) != file_digest(other)
    assert group_digests(model)["base_embed"] != group_digests(load_checkpoint(path)[0])["base_embed"]


def test_read_header_only(saved):
    _, path = saved
    header = read_header(path)
    assert header["meta"]["note"] == "fixture"
    names = [g["name"] for g in header["groups"]]
    assert names == list(GROUP_NAMES)
    assert all("offset" in t for g in header["groups"] for t in g["tensors"])


def test_bad_magic(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[:8] = b"NOTMAGIC"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        read_header(path)


def test_truncated_payload(saved):
    _, path = saved
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_header(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(CheckpointError):
        read_header(path)


def _rewrite_header(path, mutate):
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    mutate(header)
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + raw[12 + hlen :])


def test_unknown_version(saved):
    _, path = saved
    _rewrite_header(path, lambda h: h.__setitem__("format_version", 99))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_shape_mismatch(saved):
    _, path = saved
    def mutate(h):
        h["groups"][0]["tensors"][0]["shape"] = [1, 1]
    _rewrite_header(path, mutate)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_tensor(saved):
    _, path = saved
    def mutate(h):
        g = h["groups"][0]
        g["tensors"] = [t for t in g["tensors"] if t["name"] != "base_embed"]
    _rewrite_header(path, mutate)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

import json
import struct
import warnings
from pathlib import Path

import numpy as np
import pytest

from masakit import checkpoint as ck
from masakit.compress import compress_model, materialize_compressed
from masakit.errors import ValidationError
from masakit.model import (
    ToyConfig,
    bake_params,
    forward_loss,
    init_params,
    params_to_tensors,
    tensors_to_params,
)
from util import synthetic_corpus

GOLDEN_DIR = Path(__file__).parent / "golden"

GOLDEN_CONFIG = ToyConfig(
    num_layers=2, model_dim=8, num_heads=2, vocab_size=64, max_seq=16,
    mode="qkvo", num_atoms=2, seed=1234,
)


def golden_tensors():
    params = bake_params(init_params(GOLDEN_CONFIG))
    return params_to_tensors(params)


def _roundtrip(tmp_path, tensors, meta, name="x.ckpt"):
    path = tmp_path / name
    ck.save_checkpoint(path, tensors, meta)
    data = ck.load_checkpoint(path)
    assert sorted(data.tensors) == sorted(tensors)
    for key, arr in tensors.items():
        assert np.array_equal(
            data.tensors[key], np.asarray(arr, dtype=np.float32)
        ), key
    # re-saving the loaded image reproduces the file byte for byte
    path2 = tmp_path / ("again_" + name)
    ck.save_checkpoint(path2, data.tensors, data.meta)
    assert path.read_bytes() == path2.read_bytes()
    return data


def test_roundtrip_dense(tmp_path):
    params = init_params(ToyConfig(num_layers=2, model_dim=8, num_heads=2, seed=3))
    tensors, meta = params_to_tensors(params)
    _roundtrip(tmp_path, tensors, meta)


def test_roundtrip_qkv(tmp_path):
    cfg = ToyConfig(num_layers=2, model_dim=8, num_heads=2, mode="qkv", num_atoms=2, seed=4)
    tensors, meta = params_to_tensors(bake_params(init_params(cfg)))
    _roundtrip(tmp_path, tensors, meta)


def test_roundtrip_qkvo(tmp_path):
    cfg = ToyConfig(num_layers=3, model_dim=8, num_heads=2, mode="qkvo", num_atoms=2, seed=5)
    tensors, meta = params_to_tensors(bake_params(init_params(cfg)))
    _roundtrip(tmp_path, tensors, meta)


def test_roundtrip_compressed_with_residuals(tmp_path):
    params = init_params(ToyConfig(num_layers=4, model_dim=8, num_heads=2, seed=6))
    calib = synthetic_corpus(3000, 6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = compress_model(
            params, alpha=0.9, groups=("uniform", 1), basis=1,
            calibration=calib, window=16,
        )
    assert any(name.endswith(".left") for name in res.tensors)
    assert any(".whitening." in name for name in res.tensors)
    data = _roundtrip(tmp_path, res.tensors, res.meta)
    rebuilt = materialize_compressed(data.tensors, data.meta)
    assert np.isfinite(forward_loss(rebuilt, np.arange(10)))


def test_loaded_model_forward_matches(tmp_path):
    cfg = ToyConfig(num_layers=2, model_dim=8, num_heads=2, mode="qkvo", num_atoms=2, seed=7)
    params = bake_params(init_params(cfg))
    tensors, meta = params_to_tensors(params)
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(path, tensors, meta)
    loaded = tensors_to_params(ck.load_checkpoint(path).tensors, meta)
    seq = np.arange(12) % 64
    # float32 storage perturbs weights, so agreement is close but not exact
    assert abs(forward_loss(params, seq) - forward_loss(loaded, seq)) < 1e-5


def test_empty_tensor_list_rejected(tmp_path):
    with pytest.raises(ValidationError):
        ck.save_checkpoint(tmp_path / "e.ckpt", {}, {})


def test_failed_save_leaves_no_file(tmp_path):
    target = tmp_path / "bad.ckpt"
    with pytest.raises(ValidationError):
        ck.save_checkpoint(target, {"a": np.array([[np.inf]])}, _meta())
    assert not target.exists()
    assert not Path(str(target) + ".tmp").exists()


def _meta(**over):
    meta = {
        "L": 1, "d": 1, "heads": 1, "mode": "dense", "S": None,
        "groups": None, "format_version": 1,
    }
    meta.update(over)
    return meta


def test_wrong_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ck.BadMagicError, match="not a MASA checkpoint"):
        ck.load_checkpoint(p)


def test_wrong_version(tmp_path):
    p = tmp_path / "x.ckpt"
    ck.save_checkpoint(p, {"a": np.ones((1, 1))}, _meta())
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(ck.BadVersionError):
        ck.load_checkpoint(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "x.ckpt"
    ck.save_checkpoint(p, {"a": np.ones((2, 2))}, _meta())
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(ck.PayloadError, match="payload short"):
        ck.load_checkpoint(p)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "x.ckpt"
    ck.save_checkpoint(p, {"a": np.ones((2, 2))}, _meta())
    p.write_bytes(p.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(ck.PayloadError, match="trailing"):
        ck.load_checkpoint(p)


def _rewrite_header(path, mutate):
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[5:13])
    header = json.loads(raw[13 : 13 + hlen].decode())
    mutate(header)
    new = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(raw[:5] + struct.pack("<Q", len(new)) + new + raw[13 + hlen :])


def test_unsorted_index_rejected(tmp_path):
    p = tmp_path / "x.ckpt"
    ck.save_checkpoint(p, {"a": np.ones((1, 1)), "b": np.ones((1, 1))}, _meta())

    def swap(h):
        h["tensors"] = h["tensors"][::-1]

    _rewrite_header(p, swap)
    with pytest.raises(ck.LayoutError, match="sorted"):
        ck.load_checkpoint(p)


def test_overlapping_offsets_rejected(tmp_path):
    p = tmp_path / "x.ckpt"
    ck.save_checkpoint(p, {"a": np.ones((1, 1)), "b": np.ones((1, 1))}, _meta())

    def overlap(h):
        h["tensors"][1]["offset"] = 0

    _rewrite_header(p, overlap)
    with pytest.raises(ck.LayoutError, match="overlap"):
        ck.load_checkpoint(p)


def test_bad_json_header(tmp_path):
    p = tmp_path / "x.ckpt"
    ck.save_checkpoint(p, {"a": np.ones((1, 1))}, _meta())
    raw = bytearray(p.read_bytes())
    raw[13] = 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(ck.HeaderError):
        ck.load_checkpoint(p)


def test_missing_file():
    with pytest.raises(ValidationError, match="not found"):
        ck.load_checkpoint("/nonexistent/path.ckpt")


def test_golden_header_bytes():
    tensors, meta = golden_tensors()
    got = ck.header_bytes(tensors, meta)
    golden = (GOLDEN_DIR / "tiny_header.json").read_bytes()
    assert got == golden


def test_golden_file_bytes(tmp_path):
    tensors, meta = golden_tensors()
    path = tmp_path / "tiny.ckpt"
    ck.save_checkpoint(path, tensors, meta)
    assert path.read_bytes() == (GOLDEN_DIR / "tiny.ckpt").read_bytes()


def test_golden_known_tensor_sums():
    data = ck.load_checkpoint(GOLDEN_DIR / "tiny.ckpt")
    sums = json.loads((GOLDEN_DIR / "tiny_sums.json").read_text())
    for name, expect in sums.items():
        assert float(np.sum(np.abs(data.tensors[name]))) == pytest.approx(
            expect, rel=1e-6
        ), name

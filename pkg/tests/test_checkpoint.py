import struct

import numpy as np
import pytest
import torch

from vqcseq.checkpoint import MAGIC, VERSION, load_checkpoint, read_checkpoint, restore_optimizer, save_checkpoint
from vqcseq.exceptions import BadMagicError, ConfigMismatchError, DimOverflowError, FormatError, TruncatedFileError, VersionMismatchError
from vqcseq.model import ModelConfig, VQSeq2Seq


def trained(cfg=None, steps=2):
    model = VQSeq2Seq(cfg or ModelConfig(base_channels=4, K=16))
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    X = torch.rand(2, 32, 32, generator=torch.Generator().manual_seed(0))
    for _ in range(steps):
        opt.zero_grad()
        model.translate(X, 0, 1).abs().mean().backward()
        opt.step()
    return model, opt


def test_roundtrip_parameters_and_optimizer(tmp_path):
    model, opt = trained()
    save_checkpoint(tmp_path / "a.vqcm", model, opt, extra={"step": 2})
    ms = load_checkpoint(tmp_path / "a.vqcm")
    for (k, a), (k2, b) in zip(model.state_dict().items(), ms.model.state_dict().items()):
        assert k == k2 and torch.equal(a, b)
    assert ms.extra == {"step": 2}
    opt2 = torch.optim.AdamW(ms.model.parameters(), lr=1e-3)
    restore_optimizer(opt2, ms.model, ms.optimizer_state)
    pairs = list(zip(model.parameters(), ms.model.parameters()))
    assert [p in opt.state for p, _ in pairs] == [q in opt2.state for _, q in pairs]
    for p, q in pairs:
        if p not in opt.state:
            continue
        s, t = opt.state[p], opt2.state[q]
        assert torch.equal(s["exp_avg"], t["exp_avg"])
        assert torch.equal(s["exp_avg_sq"], t["exp_avg_sq"])
        assert float(s["step"]) == float(t["step"])


def test_save_load_save_is_byte_identical(tmp_path):
    model, opt = trained()
    save_checkpoint(tmp_path / "a.vqcm", model, opt, extra={"note": "x"})
    ms = load_checkpoint(tmp_path / "a.vqcm")
    save_checkpoint(tmp_path / "b.vqcm", ms.model, extra=ms.extra, optimizer_state=ms.optimizer_state)
    assert (tmp_path / "a.vqcm").read_bytes() == (tmp_path / "b.vqcm").read_bytes()


def test_post_load_outputs_identical(tmp_path):
    model, _ = trained()
    X = torch.rand(32, 32)
    save_checkpoint(tmp_path / "m.vqcm", model)
    loaded = load_checkpoint(tmp_path / "m.vqcm").model
    with torch.no_grad():
        assert torch.equal(model.translate(X, 1, 3), loaded.translate(X, 1, 3))


def test_float64_roundtrip(tmp_path):
    model = VQSeq2Seq(ModelConfig(D=2, K=8, N=3, base_channels=4, downsample_stages=1)).double()
    save_checkpoint(tmp_path / "d.vqcm", model)
    loaded = load_checkpoint(tmp_path / "d.vqcm").model
    assert loaded.dtype == torch.float64
    assert torch.equal(loaded.codebook.embeddings, model.codebook.embeddings)


def test_header_layout(tmp_path):
    model = VQSeq2Seq(ModelConfig(base_channels=4, K=16))
    save_checkpoint(tmp_path / "m.vqcm", model)
    raw = (tmp_path / "m.vqcm").read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack("<I", raw[4:8])[0] == VERSION
    header, tensors = read_checkpoint(tmp_path / "m.vqcm")
    assert header["model"]["K"] == 16
    assert "codebook.embeddings" in tensors


def test_config_mismatch(tmp_path):
    small = VQSeq2Seq(ModelConfig(base_channels=4, K=128))
    save_checkpoint(tmp_path / "k.vqcm", small)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(tmp_path / "k.vqcm", expected_config=ModelConfig(base_channels=4, K=256))
    load_checkpoint(tmp_path / "k.vqcm", expected_config=ModelConfig(base_channels=4, K=128))


@pytest.fixture
def saved(tmp_path):
    path = tmp_path / "m.vqcm"
    save_checkpoint(path, VQSeq2Seq(ModelConfig(base_channels=4, K=16)))
    return path


def test_bad_magic(saved):
    raw = bytearray(saved.read_bytes())
    raw[:4] = b"NOPE"
    saved.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_checkpoint(saved)


def test_version_mismatch(saved):
    raw = bytearray(saved.read_bytes())
    raw[4:8] = struct.pack("<I", VERSION + 1)
    saved.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(saved)


@pytest.mark.parametrize("keep", [2, 10, 200, -7])
def test_truncated(saved, keep):
    raw = saved.read_bytes()
    saved.write_bytes(raw[:keep])
    with pytest.raises((TruncatedFileError, BadMagicError)):
        load_checkpoint(saved)


def test_trailing_bytes(saved):
    saved.write_bytes(saved.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(saved)


def test_dim_overflow(tmp_path):
    header = b"{}"
    name = b"huge"
    blob = MAGIC + struct.pack("<II", VERSION, len(header)) + header + struct.pack("<I", 1)
    blob += struct.pack("<H", len(name)) + name + struct.pack("<BB", 0, 2) + struct.pack("<II", 2**20, 2**20)
    path = tmp_path / "o.vqcm"
    path.write_bytes(blob)
    with pytest.raises(DimOverflowError):
        read_checkpoint(path)


def test_error_categories_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedFileError, DimOverflowError}
    assert len(kinds) == 4
    assert not issubclass(ConfigMismatchError, FormatError)


def test_unknown_dtype_code(tmp_path):
    header = b"{}"
    blob = MAGIC + struct.pack("<II", VERSION, len(header)) + header + struct.pack("<I", 1)
    blob += struct.pack("<H", 1) + b"x" + struct.pack("<BB", 9, 1) + struct.pack("<I", 1) + np.zeros(1, "<f4").tobytes()
    path = tmp_path / "u.vqcm"
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        read_checkpoint(path)

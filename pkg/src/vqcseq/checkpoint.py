"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VQCM" | version u32 | header_len u32 | header (UTF-8 JSON)
    | n_tensors u32 | n_tensors x [name_len u16 | name | dtype u8 | rank u8
                                  | dims u32 x rank | payload]

The JSON header holds the model config under ``"model"`` and free-form
trainer state under ``"extra"``.  Tensors are model parameters followed by
optimizer moments named ``optim/<param>/<slot>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import BadMagicError, ConfigMismatchError, DimOverflowError, FormatError, TruncatedFileError, VersionMismatchError
from .model import ModelConfig, VQSeq2Seq

MAGIC = b"VQCM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
MAX_ELEMENTS = 1 << 31


@dataclass
class ModelState:
    model: VQSeq2Seq
    optimizer_state: dict = field(default_factory=dict)  # param name -> {slot: tensor}
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg


def _encode_tensor(name: str, t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _CODES:
        raise TypeError(f"unsupported dtype {t.dtype} for tensor {name}")
    code = _CODES[t.dtype]
    raw = name.encode()
    arr = t.numpy().astype(_DTYPES[code], copy=False)
    return (
        struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
        + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    )


def optimizer_slots(optimizer, model) -> dict:
    """Optimizer state keyed by parameter name."""
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if st:
                out[names[id(p)]] = {k: (v if isinstance(v, torch.Tensor) else torch.tensor(v)) for k, v in st.items()}
    return out


def restore_optimizer(optimizer, model, slots: dict) -> None:
    params = dict(model.named_parameters())
    for name, st in slots.items():
        p = params[name]
        optimizer.state[p] = {k: v.clone().to(p.dtype) if k != "step" else v.clone() for k, v in st.items()}


def save_checkpoint(path, model: VQSeq2Seq, optimizer=None, extra: dict | None = None, optimizer_state: dict | None = None) -> None:
    header = json.dumps({"model": model.cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    tensors = list(model.state_dict().items())
    slots = optimizer_slots(optimizer, model) if optimizer is not None else (optimizer_state or {})
    for pname in sorted(slots):
        for slot in sorted(slots[pname]):
            tensors.append((f"optim/{pname}/{slot}", slots[pname][slot]))
    body = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(tensors))]
    body.extend(_encode_tensor(n, t) for n, t in tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(body))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf, name):
        self.buf, self.pos, self.name = buf, 0, name

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.name}: truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Parse a checkpoint into ``(header_dict, {name: tensor})``."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, str(path))
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    r.take(4)
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if n > MAX_ELEMENTS:
            raise DimOverflowError(f"{path}: tensor {name} dims {dims} too large")
        dt = _DTYPES[code]
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return header, tensors


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> ModelState:
    """Rebuild model (and optimizer moments) from a checkpoint file.

    Raises ConfigMismatchError if ``expected_config`` differs from the
    stored one.
    """
    header, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig(**header["model"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad model config in header: {exc}") from exc
    if expected_config is not None and cfg != expected_config:
        diff = {k: (v, getattr(cfg, k)) for k, v in expected_config.to_dict().items() if getattr(cfg, k) != v}
        raise ConfigMismatchError(f"{path}: config mismatch (expected, found): {diff}")
    model = VQSeq2Seq(cfg)
    sd = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    dtypes = {t.dtype for t in sd.values() if t.is_floating_point()}
    if dtypes == {torch.float64}:
        model.double()
    try:
        model.load_state_dict(sd, strict=True)
    except RuntimeError as exc:
        raise ConfigMismatchError(f"{path}: parameters do not fit the stored config: {exc}") from exc
    slots = {}
    for k, v in tensors.items():
        if k.startswith("optim/"):
            pname, slot = k[len("optim/") :].rsplit("/", 1)
            slots.setdefault(pname, {})[slot] = v
    return ModelState(model, slots, header.get("extra", {}))

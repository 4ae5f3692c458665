"""Synthetic multi-contrast phantoms, the missing-sequence pairing protocol,
and the on-disk dataset format.

Dataset layout::

    <dir>/manifest.json
    <dir>/<subject_id>/seq<i>.vqt     # 1-based sequence number, only if flagged
    <dir>/<subject_id>/tissue.vqt     # label map (stored as float32)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
from scipy import ndimage

from .exceptions import BadMagicError, DimOverflowError, IntegrityError, ShapeError, TruncatedFileError, VersionMismatchError
from .vqc import SequenceSet

TENSOR_MAGIC = b"VQCT"
TENSOR_VERSION = 1
MAX_RANK = 8
MAX_ELEMENTS = 1 << 31

N_SEQUENCES = 4
SPLITS = ("train", "val", "test")
# Train subsets of the pairing protocol: consecutive sequences are paired.
TRAIN_SUBSETS = ((1, 1, 0, 0), (0, 1, 1, 0), (0, 0, 1, 1))

# Base intensity per label for each of the 4 sequences.  Columns are
# background, tissues 1..5, and the last column is the lesion.  Sequence 1
# barely separates the lesion from tissue 3; sequence 4 makes it the
# brightest structure.
_TISSUE_TABLE = np.array(
    [
        [0.0, 0.55, 0.80, 0.30, 0.65, 0.45],
        [0.0, 0.60, 0.78, 0.35, 0.50, 0.70],
        [0.0, 0.35, 0.25, 0.80, 0.55, 0.45],
        [0.0, 0.45, 0.30, 0.20, 0.60, 0.35],
    ]
)
_LESION = np.array([0.18, 0.95, 0.65, 0.98])
MAX_TISSUES = _TISSUE_TABLE.shape[1] - 1

JITTER = 0.03
NOISE_SIGMA = 0.01
BLUR_SIGMA = 0.6


# -- tensor files -------------------------------------------------------------

def write_tensor(path, array) -> None:
    """Write a float32 array: magic, version, rank, dims (u32 LE), LE payload."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def decode_tensor(buf: bytes, name="<buffer>") -> np.ndarray:
    if len(buf) < 4:
        raise TruncatedFileError(f"{name}: file too short for a header ({len(buf)} bytes)")
    if buf[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"{name}: bad magic {buf[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(buf) < 12:
        raise TruncatedFileError(f"{name}: truncated header")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != TENSOR_VERSION:
        raise VersionMismatchError(f"{name}: format version {version}, expected {TENSOR_VERSION}")
    if rank > MAX_RANK:
        raise DimOverflowError(f"{name}: rank {rank} exceeds maximum {MAX_RANK}")
    off = 12 + 4 * rank
    if len(buf) < off:
        raise TruncatedFileError(f"{name}: truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimOverflowError(f"{name}: dims {dims} exceed {MAX_ELEMENTS} elements")
    need = off + 4 * count
    if len(buf) < need:
        raise TruncatedFileError(f"{name}: payload has {len(buf) - off} bytes, expected {4 * count}")
    if len(buf) > need:
        raise TruncatedFileError(f"{name}: {len(buf) - need} trailing bytes after payload")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), str(path))


# -- phantoms ---------------------------------------------------------------

@dataclass
class Phantom:
    tissue_map: np.ndarray
    contrast_tables: np.ndarray  # (4, n_labels), column = label
    subject_id: str = ""

    @property
    def lesion_label(self) -> int:
        return self.contrast_tables.shape[1] - 1

    def render(self, seq: int) -> np.ndarray:
        return self.contrast_tables[seq][self.tissue_map]


def contrast_tables(n_tissues: int) -> np.ndarray:
    """Fixed (4, n_tissues + 2) table: background, tissues, lesion."""
    return np.concatenate([_TISSUE_TABLE[:, : n_tissues + 1], _LESION[:, None]], axis=1)


def _ellipse(H, W, cy, cx, ry, rx, theta):
    y, x = np.mgrid[:H, :W].astype(float)
    y, x = y - cy, x - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * x + s * y) / rx
    v = (-s * x + c * y) / ry
    return u * u + v * v <= 1.0


def subject_seed(master_seed: int, subject_id: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{subject_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def generate_phantom(seed: int, H: int = 32, W: int = 32, n_tissues: int = 3, lesion_probability: float = 0.8, subject_id: str = ""):
    """Random phantom and its four contrast renderings.

    Returns ``(phantom, images)`` where ``images`` is a list of four float32
    arrays in [0, 1] sharing the same tissue geometry.
    """
    if H < 32 or W < 32:
        raise ShapeError(f"phantoms need H, W >= 32, got {H}x{W}")
    if not 1 <= n_tissues <= MAX_TISSUES:
        raise ValueError(f"n_tissues must be in [1, {MAX_TISSUES}], got {n_tissues}")
    rng = np.random.default_rng(seed)
    tmap = np.zeros((H, W), dtype=np.int64)

    cy = H / 2 + rng.uniform(-1.5, 1.5)
    cx = W / 2 + rng.uniform(-1.5, 1.5)
    ry = H * rng.uniform(0.36, 0.44)
    rx = W * rng.uniform(0.30, 0.40)
    head = _ellipse(H, W, cy, cx, ry, rx, rng.uniform(-0.3, 0.3))
    tmap[head] = 1
    for label in range(2, n_tissues + 1):
        r = rng.uniform(0.25, 0.55, size=2) * (ry, rx)
        oy, ox = rng.uniform(-0.4, 0.4, size=2) * (ry, rx)
        tmap[_ellipse(H, W, cy + oy, cx + ox, r[0], r[1], rng.uniform(0, np.pi)) & head] = label
    if rng.random() < lesion_probability:
        r = rng.uniform(3.0, 5.5, size=2) * (H / 32, W / 32)
        oy, ox = rng.uniform(-0.45, 0.45, size=2) * (ry, rx)
        tmap[_ellipse(H, W, cy + oy, cx + ox, r[0], r[1], rng.uniform(0, np.pi)) & head] = n_tissues + 1

    tables = contrast_tables(n_tissues)
    phantom = Phantom(tmap, tables, subject_id)
    support = ndimage.binary_dilation(head, iterations=1)
    images = []
    for seq in range(N_SEQUENCES):
        table = tables[seq] + rng.uniform(-JITTER, JITTER, size=tables.shape[1])
        table[0] = 0.0
        img = ndimage.gaussian_filter(table[tmap], BLUR_SIGMA)
        img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape) * support
        img[~support] = 0.0
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return phantom, images


# -- pairing protocol ----------------------------------------------------------

@dataclass
class PairingManifest:
    """Subject id -> availability flags and split, plus generator settings."""

    subjects: Dict[str, dict] = field(default_factory=dict)
    seed: int = 0
    H: int = 32
    W: int = 32
    n_tissues: int = 3
    lesion_probability: float = 0.8

    def ids(self, split=None) -> List[str]:
        return [s for s, e in self.subjects.items() if split is None or e["split"] == split]

    def flags(self, subject_id) -> np.ndarray:
        return np.asarray(self.subjects[subject_id]["flags"], dtype=np.int64)

    def co_available_pairs(self, split="train"):
        """Set of 1-based sequence pairs observed together in ``split``."""
        pairs = set()
        for sid in self.ids(split):
            on = [i + 1 for i, f in enumerate(self.flags(sid)) if f]
            pairs.update((a, b) for a in on for b in on if a < b)
        return pairs

    def to_json(self) -> str:
        doc = {
            "format": "vqcseq-manifest",
            "version": 1,
            "seed": self.seed,
            "H": self.H,
            "W": self.W,
            "n_tissues": self.n_tissues,
            "lesion_probability": self.lesion_probability,
            "subjects": [{"id": s, **e} for s, e in self.subjects.items()],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PairingManifest":
        doc = json.loads(text)
        subjects = {e["id"]: {"split": e["split"], "flags": list(e["flags"])} for e in doc["subjects"]}
        return cls(subjects, doc["seed"], doc["H"], doc["W"], doc["n_tissues"], doc["lesion_probability"])


def build_pairing(n_train: int = 90, n_val: int = 12, n_test: int = 30, seed: int = 0, **gen) -> PairingManifest:
    """Train subjects split evenly over the three paired subsets; val/test complete."""
    if n_train % 3:
        raise ValueError(f"n_train must be divisible by 3, got {n_train}")
    rng = np.random.default_rng(seed)
    subset = np.repeat(np.arange(3), n_train // 3)
    rng.shuffle(subset)
    subjects = {}
    for k in range(n_train):
        subjects[f"train_{k:04d}"] = {"split": "train", "flags": list(TRAIN_SUBSETS[subset[k]])}
    for split, n in (("val", n_val), ("test", n_test)):
        for k in range(n):
            subjects[f"{split}_{k:04d}"] = {"split": split, "flags": [1] * N_SEQUENCES}
    return PairingManifest(subjects, seed, **gen)


# -- dataset on disk ------------------------------------------------------------

def seq_filename(i: int) -> str:
    return f"seq{i + 1}.vqt"


def generate_dataset(out_dir, seed: int = 0, n_train: int = 90, n_val: int = 12, n_test: int = 30, H: int = 32, W: int = 32, n_tissues: int = 3, lesion_probability: float = 0.8) -> PairingManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_pairing(n_train, n_val, n_test, seed, H=H, W=W, n_tissues=n_tissues, lesion_probability=lesion_probability)
    for sid in manifest.ids():
        phantom, images = generate_phantom(subject_seed(seed, sid), H, W, n_tissues, lesion_probability, sid)
        sdir = out / sid
        sdir.mkdir(exist_ok=True)
        for i, f in enumerate(manifest.flags(sid)):
            if f:
                write_tensor(sdir / seq_filename(i), images[i])
        write_tensor(sdir / "tissue.vqt", phantom.tissue_map)
    (out / "manifest.json").write_text(manifest.to_json() + "\n")
    return manifest


def load_manifest(dataset_dir) -> PairingManifest:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise IntegrityError(f"missing manifest: {path}")
    try:
        return PairingManifest.from_json(path.read_text())
    except (KeyError, ValueError, TypeError) as exc:
        raise IntegrityError(f"malformed manifest {path}: {exc}") from exc


def load_subject(dataset_dir, subject_id: str, manifest: PairingManifest | None = None) -> SequenceSet:
    """Load the flagged sequences of one subject; absent slots stay None."""
    manifest = manifest or load_manifest(dataset_dir)
    if subject_id not in manifest.subjects:
        raise IntegrityError(f"subject {subject_id!r} not in manifest of {dataset_dir}")
    sdir = Path(dataset_dir) / subject_id
    flags = manifest.flags(subject_id)
    images = []
    for i, f in enumerate(flags):
        if not f:
            images.append(None)
            continue
        path = sdir / seq_filename(i)
        if not path.exists():
            raise IntegrityError(f"missing file for flagged sequence: {path}")
        images.append(read_tensor(path))
    tpath = sdir / "tissue.vqt"
    tissue = read_tensor(tpath).astype(np.int64) if tpath.exists() else None
    return SequenceSet(images, flags, subject_id=subject_id, tissue_map=tissue, meta={"split": manifest.subjects[subject_id]["split"]})


class PhantomDataset:
    """Read-only view over a dataset directory; subjects are cached on first load."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        self._cache: Dict[str, SequenceSet] = {}

    def ids(self, split=None):
        return self.manifest.ids(split)

    def subject(self, subject_id) -> SequenceSet:
        if subject_id not in self._cache:
            self._cache[subject_id] = load_subject(self.root, subject_id, self.manifest)
        return self._cache[subject_id]

    def split(self, name) -> List[SequenceSet]:
        return [self.subject(s) for s in self.ids(name)]

    def verify(self) -> None:
        """Load every subject, raising IntegrityError on the first problem."""
        for sid in self.ids():
            self.subject(sid)

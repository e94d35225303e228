"""Sample containers and the binary dataset file format.

A sample couples, per modality, a token grid (tokenized node signals plus
missing flags), the node layout in meters, and persistent node identities,
with the source labels used by downstream tasks.

Dataset files: magic ``SPDS``, version u32, then header counts, modality
descriptors, and per-sample records.  All integers are little-endian u64
(except the u32 version), all floats little-endian IEEE-754 f64.  The exact
field order is documented in the README's file-format reference and mirrored
by ``save_dataset`` / ``load_dataset`` below.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

MAGIC = b"SPDS"
VERSION = 1


@dataclass
class TokenGrid:
    """Tokenized signals of one modality: nodes x tokens x token-dim."""

    modality: int
    values: np.ndarray    # (n, m, d_x) float64
    missing: np.ndarray   # (n, m) bool

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.missing = np.ascontiguousarray(self.missing, dtype=bool)
        if self.values.ndim != 3 or self.missing.shape != self.values.shape[:2]:
            raise ContractError(
                f"token grid shapes disagree: values {self.values.shape}, "
                f"missing {self.missing.shape}")
        # missing tokens carry value zero
        if self.missing.any():
            self.values[self.missing] = 0.0

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def m(self):
        return self.values.shape[1]

    @property
    def token_dim(self):
        return self.values.shape[2]


@dataclass
class SpatialLayout:
    """Node coordinates in meters; 2-D or 3-D."""

    coords: np.ndarray  # (n, d_s) float64

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] not in (2, 3):
            raise ContractError(f"layout must be (n, 2|3), got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ContractError("layout coordinates must be finite")


@dataclass(frozen=True)
class ModalityMeta:
    name: str
    nodes: int
    tokens: int
    token_dim: int
    sample_rate: float
    wave_speed: float


@dataclass(frozen=True)
class DatasetMeta:
    spatial_dim: int
    classes: int
    layout_pool: int
    area_halfwidth: float
    seed: int
    modalities: tuple[ModalityMeta, ...]


@dataclass
class SyntheticSample:
    scene: int
    label_class: int
    source_pos: np.ndarray          # (d_s,) meters
    amplitude: float
    seed: int
    grids: list[TokenGrid]
    layouts: list[SpatialLayout]
    node_ids: list[np.ndarray]      # persistent per-modality identities


@dataclass
class Dataset:
    meta: DatasetMeta
    samples: list[SyntheticSample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Writer:
    def __init__(self):
        self.chunks: list[bytes] = []

    def u32(self, v):
        self.chunks.append(struct.pack("<I", int(v)))

    def u64(self, v):
        self.chunks.append(struct.pack("<Q", int(v)))

    def f64(self, v):
        self.chunks.append(struct.pack("<d", float(v)))

    def f64s(self, arr):
        self.chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def u64s(self, arr):
        self.chunks.append(np.ascontiguousarray(arr, dtype="<u8").tobytes())

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u64(len(raw))
        self.chunks.append(raw)

    def payload(self) -> bytes:
        return b"".join(self.chunks)


class _Reader:
    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.off = 0
        self.what = what

    def take(self, count: int) -> bytes:
        if self.off + count > len(self.blob):
            raise ContractError(
                f"truncated {self.what}: needed {count} bytes at offset {self.off}, "
                f"file has {len(self.blob)}")
        out = self.blob[self.off:self.off + count]
        self.off += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def u64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<u8").astype(np.int64)

    def text(self) -> str:
        return self.take(self.u64()).decode("utf-8")


def save_dataset(ds: Dataset, path: str) -> None:
    w = _Writer()
    w.chunks.append(MAGIC)
    w.u32(VERSION)
    meta = ds.meta
    w.u64(len(ds.samples))
    w.u64(len(meta.modalities))
    w.u64(meta.classes)
    w.u64(meta.layout_pool)
    w.u64(meta.spatial_dim)
    w.f64(meta.area_halfwidth)
    w.u64(meta.seed)
    for mm in meta.modalities:
        w.text(mm.name)
        w.u64(mm.nodes)
        w.u64(mm.tokens)
        w.u64(mm.token_dim)
        w.f64(mm.sample_rate)
        w.f64(mm.wave_speed)
    for s in ds.samples:
        w.u64(s.scene)
        w.u64(s.label_class)
        w.u64(s.seed)
        w.f64(s.amplitude)
        w.f64s(s.source_pos)
        for k, mm in enumerate(meta.modalities):
            w.u64s(s.node_ids[k])
            w.f64s(s.layouts[k].coords)
            w.f64s(s.grids[k].values)
            w.u64s(s.grids[k].missing.astype(np.uint64))
    _atomic_write(path, w.payload())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, "dataset file")
    if r.take(4) != MAGIC:
        raise ContractError(f"bad dataset magic in {path!r}")
    version = r.u32()
    if version != VERSION:
        raise ContractError(f"unsupported dataset version {version} (expected {VERSION})")
    count = r.u64()
    n_mod = r.u64()
    classes = r.u64()
    pool = r.u64()
    d_s = r.u64()
    area = r.f64()
    seed = r.u64()
    mods = []
    for _ in range(n_mod):
        name = r.text()
        nodes, tokens, token_dim = r.u64(), r.u64(), r.u64()
        rate, speed = r.f64(), r.f64()
        mods.append(ModalityMeta(name, nodes, tokens, token_dim, rate, speed))
    meta = DatasetMeta(d_s, classes, pool, area, seed, tuple(mods))

    samples = []
    for _ in range(count):
        scene = r.u64()
        cls = r.u64()
        sseed = r.u64()
        amp = r.f64()
        pos = r.f64s(d_s)
        grids, layouts, node_ids = [], [], []
        for k, mm in enumerate(mods):
            ids = r.u64s(mm.nodes)
            coords = r.f64s(mm.nodes * d_s).reshape(mm.nodes, d_s)
            values = r.f64s(mm.nodes * mm.tokens * mm.token_dim).reshape(
                mm.nodes, mm.tokens, mm.token_dim)
            missing = r.u64s(mm.nodes * mm.tokens).reshape(mm.nodes, mm.tokens) != 0
            grids.append(TokenGrid(k, values, missing))
            layouts.append(SpatialLayout(coords))
            node_ids.append(ids)
        samples.append(SyntheticSample(scene, cls, pos, amp, sseed, grids, layouts, node_ids))
    if r.off != len(blob):
        raise ContractError(
            f"trailing bytes in dataset file: {len(blob) - r.off} past offset {r.off}")
    return Dataset(meta, samples)

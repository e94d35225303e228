"""Binary parameter checkpoints with a bit-exact roundtrip contract.

Layout: magic ``SPAR``, version u32, entry count u64, then per entry a
name (u64 length + UTF-8 bytes), rank u64, dims u64 each, and the row-major
float64 data.  All integers little-endian.  Loading is strict: magic or
version mismatch, truncation (reported with byte offset), unknown or missing
names, and shape mismatches are all errors, never silent skips.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ContractError, ParamSet
from .data import _Reader, _Writer, _atomic_write

MAGIC = b"SPAR"
VERSION = 1


def save_checkpoint(params: ParamSet, path: str) -> None:
    w = _Writer()
    w.chunks.append(MAGIC)
    w.u32(VERSION)
    w.u64(len(params))
    for p in params:
        w.text(p.name)
        shape = p.value.shape
        w.u64(len(shape))
        for dim in shape:
            w.u64(dim)
        w.f64s(p.value.data)
    _atomic_write(path, w.payload())


def read_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, "checkpoint")
    if r.take(4) != MAGIC:
        raise ContractError(f"bad checkpoint magic in {path!r}")
    version = r.u32()
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version} (expected {VERSION})")
    count = r.u64()
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        try:
            name = r.text()
            rank = r.u64()
            dims = tuple(r.u64() for _ in range(rank))
            total = 1
            for d in dims:
                total *= d
            data = r.f64s(total).reshape(dims)
        except ContractError as e:
            raise ContractError(f"checkpoint entry {i} unreadable: {e}")
        if name in entries:
            raise ContractError(f"duplicate checkpoint entry {name!r}")
        entries[name] = data
    if r.off != len(blob):
        raise ContractError(
            f"trailing bytes in checkpoint: {len(blob) - r.off} past offset {r.off}")
    return entries


def load_checkpoint(params: ParamSet, path: str) -> None:
    """Load values into an existing parameter set, verifying names and shapes."""
    entries = read_checkpoint(path)
    expected = set(params.names())
    got = set(entries)
    if got - expected:
        raise ContractError(
            f"checkpoint holds unknown parameters: {sorted(got - expected)[:4]}")
    if expected - got:
        raise ContractError(
            f"checkpoint is missing parameters: {sorted(expected - got)[:4]}")
    for p in params:
        arr = entries[p.name]
        if arr.shape != p.value.shape:
            raise ContractError(
                f"checkpoint shape mismatch for {p.name!r}: "
                f"file has {arr.shape}, model expects {p.value.shape}")
    for p in params:
        p.value.data[...] = entries[p.name]

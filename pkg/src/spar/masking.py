"""Token visibility masks and gather/scatter between grid and sequence form.

A mask partitions the ``nodes x tokens`` grid of one modality into three
disjoint sets: visible (fed to the encoder), hidden (reconstruction targets),
and missing (absent data, excluded from both).  Visible counts follow
``round((1 - ratio) * non_missing)``, clamped to at least one token so the
encoder always has input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError


@dataclass
class TokenMask:
    visible: np.ndarray   # (n, m) bool, True = encoder sees this token
    missing: np.ndarray   # (n, m) bool, True = token absent
    ratio: float

    def __post_init__(self):
        if self.visible.shape != self.missing.shape:
            raise ContractError(
                f"mask shapes disagree: {self.visible.shape} vs {self.missing.shape}")
        if (self.visible & self.missing).any():
            raise ContractError("missing tokens can never be visible")

    @property
    def hidden(self) -> np.ndarray:
        return ~self.visible & ~self.missing

    def visible_flat(self) -> np.ndarray:
        """Flat row-major indices of visible tokens."""
        return np.flatnonzero(self.visible.reshape(-1))

    def hidden_flat(self) -> np.ndarray:
        return np.flatnonzero(self.hidden.reshape(-1))


def _missing_of(grid) -> np.ndarray:
    """Accept a TokenGrid-like object or a bare (n, m) missing-flag array."""
    if hasattr(grid, "missing"):
        return np.asarray(grid.missing, dtype=bool)
    return np.asarray(grid, dtype=bool)


def _target_visible(ratio: float, non_missing: int) -> int:
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"mask ratio must be in (0, 1), got {ratio}")
    if non_missing == 0:
        raise ContractError("cannot mask a grid with no non-missing tokens")
    # round() alone can reach zero visible tokens at high ratios; clamp so the
    # encoder precondition (>= 1 visible token per modality) always holds.
    return max(1, int(round((1.0 - ratio) * non_missing)))


def random_mask(grid, ratio: float, rng: np.random.Generator) -> TokenMask:
    """Uniformly choose the visible set among non-missing tokens."""
    missing = _missing_of(grid)
    candidates = np.flatnonzero(~missing.reshape(-1))
    k = _target_visible(ratio, candidates.size)
    picked = rng.choice(candidates, size=k, replace=False)
    visible = np.zeros(missing.size, dtype=bool)
    visible[picked] = True
    return TokenMask(visible.reshape(missing.shape), missing, ratio)


def node_balanced_mask(grid, ratio: float, min_visible_per_node: int,
                       rng: np.random.Generator) -> TokenMask:
    """Random mask that keeps at least ``min_visible_per_node`` tokens per node.

    Nodes with fewer non-missing tokens than the minimum contribute all they
    have.  The total visible count matches ``random_mask``.
    """
    missing = _missing_of(grid)
    n, m = missing.shape
    if min_visible_per_node < 0:
        raise ContractError("minimum visible per node cannot be negative")
    candidates = ~missing
    k = _target_visible(ratio, int(candidates.sum()))
    if min_visible_per_node * n > k:
        raise ContractError(
            f"node-balanced minimum infeasible: {n} nodes x min {min_visible_per_node} "
            f"exceeds the visible budget of {k} tokens")

    visible = np.zeros((n, m), dtype=bool)
    for i in range(n):
        avail = np.flatnonzero(candidates[i])
        take = min(min_visible_per_node, avail.size)
        if take > 0:
            visible[i, rng.choice(avail, size=take, replace=False)] = True
    remaining = k - int(visible.sum())
    if remaining > 0:
        pool = np.flatnonzero((candidates & ~visible).reshape(-1))
        picked = rng.choice(pool, size=remaining, replace=False)
        vflat = visible.reshape(-1)
        vflat[picked] = True
    return TokenMask(visible, missing, ratio)


def node_drop_mask(grid, drop_count: int,
                   rng: np.random.Generator) -> TokenMask:
    """Hide entire nodes; every other non-missing token stays visible."""
    missing = _missing_of(grid)
    n, m = missing.shape
    if not 0 < drop_count < n:
        raise ContractError(f"drop count must be in (0, {n}), got {drop_count}")
    dropped = rng.choice(n, size=drop_count, replace=False)
    visible = ~missing
    visible[dropped, :] = False
    ratio = drop_count / n
    return TokenMask(visible, missing, ratio)


def complement(mask: TokenMask) -> TokenMask:
    """Flip visibility over non-missing tokens; an involution."""
    return TokenMask(mask.hidden.copy(), mask.missing, 1.0 - mask.ratio)


def gather_visible(grid: np.ndarray, mask: TokenMask):
    """Pack visible tokens into a sequence, preserving row-major order.

    ``grid`` is (n, m, ...) or the flattened (n*m, ...); returns the packed
    sequence and the flat index map needed to scatter it back.
    """
    idx = mask.visible_flat()
    flat = grid.reshape(mask.visible.size, -1)
    return flat[idx], idx


def scatter(seq: np.ndarray, index_map: np.ndarray, fill: float, shape) -> np.ndarray:
    """Inverse of ``gather_visible``: place rows back, ``fill`` elsewhere."""
    total = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
    width = shape[-1] if len(shape) > 1 else 1
    if seq.shape[0] != len(index_map):
        raise ContractError(
            f"sequence length {seq.shape[0]} does not match index map {len(index_map)}")
    out = np.full((total, width), fill, dtype=np.float64)
    out[np.asarray(index_map)] = seq.reshape(len(index_map), -1)
    return out.reshape(shape)

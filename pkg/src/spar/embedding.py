"""Placement-aware embeddings: signals, spatial positions, structural vectors.

Layouts are normalized per sample to zero mean and unit isotropic scale so
different deployments land in one coordinate frame, then optionally rotated
and translated as geometric augmentation during pretraining.  Signal tokens,
normalized positions, and per-node learnable structural vectors are each
mapped by an affine layer into the shared model space and summed, together
with a fixed sinusoidal token-index term (the stacks themselves carry no
positional information).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Parameter, Tensor, add, matmul, rows_gather

DEGENERATE_SCALE = 1e-9


@dataclass
class LayoutNorm:
    """A normalized layout with the statistics needed to undo it."""

    coords: np.ndarray  # (n, d_s), zero mean, unit isotropic scale
    mean: np.ndarray    # (d_s,)
    scale: float


def normalize_layout(coords: np.ndarray) -> LayoutNorm:
    """Center columns and divide by one isotropic scale.

    The scale is ``sqrt(sum_i ||centered_i||^2 / (n * d_s))``, so the layout
    keeps its shape; coincident layouts fall back to scale 1.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] < 1:
        raise ContractError(f"layout must be (n, d_s) with n >= 1, got {coords.shape}")
    if not np.isfinite(coords).all():
        raise ContractError("layout coordinates must be finite")
    n, d_s = coords.shape
    mean = coords.mean(axis=0)
    centered = coords - mean
    scale = float(np.sqrt((centered ** 2).sum() / (n * d_s)))
    if scale < DEGENERATE_SCALE:
        scale = 1.0
    return LayoutNorm(centered / scale, mean, scale)


def augment_layout(coords: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random rotation plus per-dimension translation in normalized units.

    2-D layouts rotate in the plane; 3-D layouts rotate about the vertical
    axis.  Pairwise distances are preserved.
    """
    coords = np.asarray(coords, dtype=np.float64)
    d_s = coords.shape[1]
    if d_s not in (2, 3):
        raise ContractError(f"augmentation supports 2-D or 3-D layouts, got d_s={d_s}")
    theta = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.eye(d_s)
    rot[0, 0], rot[0, 1] = c, -s
    rot[1, 0], rot[1, 1] = s, c
    shift = rng.uniform(-0.5, 0.5, size=d_s)
    return coords @ rot.T + shift


def token_position_table(m: int, d: int) -> np.ndarray:
    """Fixed sinusoidal embedding over token index, shared by all stacks."""
    pos = np.arange(m, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)
    freq = 1.0 / np.power(10000.0, idx / d)
    table = np.zeros((m, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: table[:, 1::2].shape[1]])
    return table


def affine_rows(x: Tensor, w: Parameter, b: Parameter) -> Tensor:
    """Per-row affine map ``x @ w + b`` with a shape-checked contract."""
    if x.shape[-1] != w.value.shape[0]:
        raise ContractError(
            f"embedding input dim {x.shape[-1]} does not match weight {w.value.shape}")
    return add(matmul(x, w.value), b.value)


def embed_signals(tokens: Tensor, w: Parameter, b: Parameter) -> Tensor:
    """Shared affine map from token space to the model space, (n*m, d_x) -> (n*m, d)."""
    return affine_rows(tokens, w, b)


def embed_spatial(positions: Tensor, node_of_token: np.ndarray,
                  w: Parameter, b: Parameter) -> Tensor:
    """Embed per-node positions, then broadcast so all m tokens of a node match."""
    rows = affine_rows(positions, w, b)
    return rows_gather(rows, node_of_token)


def embed_structural(row_indices: np.ndarray, table: Parameter,
                     node_of_token: np.ndarray, w: Parameter, b: Parameter) -> Tensor:
    """Look up structural vectors, project to the model space, broadcast to tokens.

    Gradients flow through both the projection and the table rows.
    """
    picked = rows_gather(table.value, row_indices)
    rows = affine_rows(picked, w, b)
    return rows_gather(rows, node_of_token)


def combine(x_emb: Tensor, s_emb: Tensor, r_emb, p_emb: Tensor) -> Tensor:
    """Elementwise sum of the embedding addends; ``r_emb`` may be None (ablation)."""
    for other in (s_emb, p_emb) + ((r_emb,) if r_emb is not None else ()):
        if other.shape != x_emb.shape:
            raise ContractError(
                f"embedding addend shapes disagree: {x_emb.shape} vs {other.shape}")
    out = add(x_emb, s_emb)
    if r_emb is not None:
        out = add(out, r_emb)
    return add(out, p_emb)

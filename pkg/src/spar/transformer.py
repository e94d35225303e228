"""Multi-head self-attention encoder stacks.

Pre-layer-norm residual blocks, GELU feedforward, and a final layer norm
after the stack.  No positional information is injected here; position enters
additively through the embeddings upstream, so a stack is permutation
equivariant over its tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError,
    ParamSet,
    Tensor,
    add,
    concat_cols,
    cols_gather,
    gelu,
    layer_norm,
    matmul,
    rows_gather,
    scale,
    softmax_rows,
    transpose,
)

_NEG_INF = -1e30  # underflows to exactly zero after row-max subtraction


@dataclass(frozen=True)
class StackConfig:
    d: int
    heads: int
    layers: int
    d_ff: int

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.layers <= 0 or self.d_ff <= 0:
            raise ContractError(f"stack dims must be positive: {self}")
        if self.d % self.heads != 0:
            raise ContractError(f"heads must divide model dim: d={self.d}, heads={self.heads}")
        if self.d_ff < self.d:
            raise ContractError(f"feedforward dim must be >= model dim: {self}")


_LAYER_FIELDS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                 "ln1_g", "ln1_b", "ln2_g", "ln2_b")


class StackParams:
    """Per-layer projection/FFN/layer-norm parameters plus the final norm."""

    def __init__(self, ps: ParamSet, prefix: str, cfg: StackConfig, rng: np.random.Generator):
        d, d_ff = cfg.d, cfg.d_ff
        self.cfg = cfg
        self.layers = []
        for i in range(cfg.layers):
            pre = f"{prefix}.layer{i}"
            layer = {
                "wq": ps.make(f"{pre}.wq", rng.normal(0.0, 0.02, (d, d))),
                "wk": ps.make(f"{pre}.wk", rng.normal(0.0, 0.02, (d, d))),
                "wv": ps.make(f"{pre}.wv", rng.normal(0.0, 0.02, (d, d))),
                "wo": ps.make(f"{pre}.wo", rng.normal(0.0, 0.02, (d, d))),
                "w1": ps.make(f"{pre}.w1", rng.normal(0.0, 0.02, (d, d_ff))),
                "b1": ps.make(f"{pre}.b1", np.zeros(d_ff)),
                "w2": ps.make(f"{pre}.w2", rng.normal(0.0, 0.02, (d_ff, d))),
                "b2": ps.make(f"{pre}.b2", np.zeros(d)),
                "ln1_g": ps.make(f"{pre}.ln1_g", np.ones(d)),
                "ln1_b": ps.make(f"{pre}.ln1_b", np.zeros(d)),
                "ln2_g": ps.make(f"{pre}.ln2_g", np.ones(d)),
                "ln2_b": ps.make(f"{pre}.ln2_b", np.zeros(d)),
            }
            self.layers.append(layer)
        self.final_g = ps.make(f"{prefix}.final_g", np.ones(d))
        self.final_b = ps.make(f"{prefix}.final_b", np.zeros(d))


def _validity_bias(key_valid, t: int):
    if key_valid is None:
        return None
    valid = np.asarray(key_valid, dtype=bool)
    if valid.shape != (t,):
        raise ContractError(f"key validity length {valid.shape} does not match {t} tokens")
    if not valid.any():
        raise ContractError("attention requires at least one valid key")
    if valid.all():
        return None
    bias = np.where(valid, 0.0, _NEG_INF)[None, :]
    return Tensor.const(bias)


def multi_head_attention(x: Tensor, layer, cfg: StackConfig, key_valid=None) -> Tensor:
    """Scaled dot-product attention over ``t x d`` tokens.

    Invalid keys get an effectively minus-infinite logit, so their attention
    weight is exactly zero in every query row.
    """
    t = x.shape[0]
    if t < 1:
        raise ContractError("attention needs at least one token")
    dh = cfg.d // cfg.heads
    inv_scale = 1.0 / math.sqrt(dh)
    bias = _validity_bias(key_valid, t)

    q = matmul(x, layer["wq"].value)
    k = matmul(x, layer["wk"].value)
    v = matmul(x, layer["wv"].value)

    head_outs = []
    for h in range(cfg.heads):
        idx = np.arange(h * dh, (h + 1) * dh)
        qh = cols_gather(q, idx)
        kh = cols_gather(k, idx)
        vh = cols_gather(v, idx)
        logits = scale(matmul(qh, transpose(kh)), inv_scale)
        if bias is not None:
            logits = add(logits, bias)
        attn = softmax_rows(logits)
        head_outs.append(matmul(attn, vh))
    merged = head_outs[0] if cfg.heads == 1 else concat_cols(head_outs)
    return matmul(merged, layer["wo"].value)


def _ffn(x: Tensor, layer) -> Tensor:
    h = add(matmul(x, layer["w1"].value), layer["b1"].value)
    return add(matmul(gelu(h), layer["w2"].value), layer["b2"].value)


def encoder_block(x: Tensor, layer, cfg: StackConfig, key_valid=None) -> Tensor:
    a = add(x, multi_head_attention(
        layer_norm(x, layer["ln1_g"].value, layer["ln1_b"].value), layer, cfg, key_valid))
    return add(a, _ffn(layer_norm(a, layer["ln2_g"].value, layer["ln2_b"].value), layer))


def encoder_stack(x: Tensor, params: StackParams, key_valid=None) -> Tensor:
    for layer in params.layers:
        x = encoder_block(x, layer, params.cfg, key_valid)
    return layer_norm(x, params.final_g.value, params.final_b.value)


def mean_pool(tokens: Tensor, valid=None) -> Tensor:
    """Arithmetic mean over valid tokens; returns a ``1 x d`` row."""
    t = tokens.shape[0]
    if valid is None:
        idx = np.arange(t)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (t,):
            raise ContractError(f"validity length {valid.shape} does not match {t} tokens")
        idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise ContractError("mean_pool requires at least one valid token")
    picked = rows_gather(tokens, idx)
    ones = Tensor.const(np.ones((1, idx.size)))
    return scale(matmul(ones, picked), 1.0 / idx.size)

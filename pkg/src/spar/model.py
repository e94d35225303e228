"""End-to-end model: per-modality encoders, joint fusion, dual decoders.

The forward path per modality: embed signal tokens, normalized node
positions, and structural vectors; sum with the token-index term; gather the
visible tokens and encode them; fuse all modalities in one joint encoder and
split the latents back.  Two decoders then run over every grid slot.  The
signal decoder sees projected latents at visible slots and
position+structure placeholders at the rest; the spatial decoder swaps the
roles, seeing signal+structure placeholders and predicting positions.  The
loss is the per-element mean squared error over hidden, non-missing slots,
summed over modalities and both objectives.

Missing tokens are zero-filled on entry, are never gathered into an encoder,
and contribute no loss terms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError,
    ParamSet,
    Tensor,
    add,
    concat_rows,
    mul,
    rows_gather,
    scale,
    sub,
    sum_all,
)
from .data import DatasetMeta, SyntheticSample
from .embedding import (
    LayoutNorm,
    affine_rows,
    augment_layout,
    combine,
    embed_signals,
    embed_spatial,
    embed_structural,
    normalize_layout,
    token_position_table,
)
from .masking import TokenMask
from .transformer import StackConfig, StackParams, encoder_stack, mean_pool

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModalityConfig:
    n: int
    m: int
    d_x: int
    table_rows: int


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    enc_layers: int = 2
    joint_layers: int = 1
    dec_layers: int = 1
    d_ff: int = 128
    d_r: int = 8
    d_s: int = 2
    modalities: tuple[ModalityConfig, ...] = ()

    @staticmethod
    def for_dataset(meta: DatasetMeta, **overrides) -> "ModelConfig":
        mods = tuple(
            ModalityConfig(mm.nodes, mm.tokens, mm.token_dim,
                           meta.layout_pool * mm.nodes)
            for mm in meta.modalities)
        return ModelConfig(d_s=meta.spatial_dim, modalities=mods, **overrides)


@dataclass
class PreparedModality:
    values_flat: np.ndarray     # (n*m, d_x), missing slots zeroed
    missing: np.ndarray         # (n, m) bool
    positions: np.ndarray       # (n, d_s) normalized (and possibly augmented)
    row_indices: np.ndarray     # (n,) structural-table rows
    node_of_token: np.ndarray   # (n*m,) node index per flat slot
    token_of_slot: np.ndarray   # (n*m,) token index per flat slot
    layout: LayoutNorm


@dataclass
class PreparedSample:
    mods: list[PreparedModality]
    label_class: int
    source_pos: np.ndarray


def prepare_sample(sample: SyntheticSample, augment: bool,
                   rng: np.random.Generator | None = None,
                   substitution: dict | None = None) -> PreparedSample:
    """Normalize (and optionally augment) layouts and flatten token grids."""
    if augment and rng is None:
        raise ContractError("augmentation requires an rng")
    mods = []
    for grid, layout, ids in zip(sample.grids, sample.layouts, sample.node_ids):
        n, m = grid.n, grid.m
        norm = normalize_layout(layout.coords)
        positions = augment_layout(norm.coords, rng) if augment else norm.coords
        values = grid.values.copy()
        values[grid.missing] = 0.0  # defend the zero-fill rule against corrupt inputs
        if substitution:
            ids = np.asarray([substitution.get(int(i), int(i)) for i in ids])
        slot_nodes = np.repeat(np.arange(n), m)
        slot_tokens = np.tile(np.arange(m), n)
        mods.append(PreparedModality(
            values_flat=values.reshape(n * m, grid.token_dim),
            missing=grid.missing,
            positions=positions,
            row_indices=np.asarray(ids, dtype=np.intp),
            node_of_token=slot_nodes,
            token_of_slot=slot_tokens,
            layout=norm,
        ))
    return PreparedSample(mods, sample.label_class, sample.source_pos)


def full_visibility_masks(prep: PreparedSample) -> list[TokenMask]:
    """Every non-missing token visible; used for representation extraction."""
    masks = []
    for pm in prep.mods:
        visible = ~pm.missing
        if not visible.any():
            raise ContractError("modality has no non-missing tokens to encode")
        masks.append(TokenMask(visible, pm.missing, 0.0))
    return masks


@dataclass
class ModalityArtifacts:
    x_emb: Tensor
    s_emb: Tensor
    r_emb: Tensor | None
    p_emb: Tensor
    combined: Tensor
    visible_idx: np.ndarray
    z: Tensor = None
    z_tilde: Tensor = None
    x_hat: Tensor = None
    s_hat: Tensor = None
    sig_dec_in: Tensor = None
    sp_dec_in: Tensor = None


@dataclass
class ForwardArtifacts:
    mods: list[ModalityArtifacts]
    masks: list[TokenMask]
    loss: Tensor = None
    signal_term: float = 0.0
    spatial_term: float = 0.0


class SparModel:
    """All learnable state plus the forward operations that use it."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if not cfg.modalities:
            raise ContractError("model needs at least one modality")
        self.cfg = cfg
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        ps = self.params
        d, d_ff, d_r, d_s = cfg.d, cfg.d_ff, cfg.d_r, cfg.d_s
        enc_cfg = StackConfig(d, cfg.heads, cfg.enc_layers, d_ff)
        dec_cfg = StackConfig(d, cfg.heads, cfg.dec_layers, d_ff)

        self.mods = []
        for k, mc in enumerate(cfg.modalities):
            pre = f"mod{k}"
            group = {
                "sig_w": ps.make(f"{pre}.sig_embed.w", rng.normal(0.0, 0.02, (mc.d_x, d))),
                "sig_b": ps.make(f"{pre}.sig_embed.b", np.zeros(d)),
                "sp_w": ps.make(f"{pre}.sp_embed.w", rng.normal(0.0, 0.02, (d_s, d))),
                "sp_b": ps.make(f"{pre}.sp_embed.b", np.zeros(d)),
                "st_w": ps.make(f"{pre}.st_embed.w", rng.normal(0.0, 0.02, (d_r, d))),
                "st_b": ps.make(f"{pre}.st_embed.b", np.zeros(d)),
                "table": ps.make(f"{pre}.structural_table",
                                 rng.normal(0.0, 0.02, (mc.table_rows, d_r))),
                "enc": StackParams(ps, f"{pre}.enc", enc_cfg, rng),
                "proj_w": ps.make(f"{pre}.latent_proj.w", rng.normal(0.0, 0.02, (d, d))),
                "proj_b": ps.make(f"{pre}.latent_proj.b", np.zeros(d)),
                "sig_dec": StackParams(ps, f"{pre}.sig_dec", dec_cfg, rng),
                "sig_head_w": ps.make(f"{pre}.sig_head.w", rng.normal(0.0, 0.02, (d, mc.d_x))),
                "sig_head_b": ps.make(f"{pre}.sig_head.b", np.zeros(mc.d_x)),
                "sp_dec": StackParams(ps, f"{pre}.sp_dec", dec_cfg, rng),
                "sp_head_w": ps.make(f"{pre}.sp_head.w", rng.normal(0.0, 0.02, (d, d_s))),
                "sp_head_b": ps.make(f"{pre}.sp_head.b", np.zeros(d_s)),
                "pos_table": token_position_table(mc.m, d),
            }
            self.mods.append(group)
        self.joint = StackParams(ps, "joint", StackConfig(d, cfg.heads, cfg.joint_layers, d_ff), rng)

    # -- forward pieces ----------------------------------------------------

    def _embed_modality(self, k: int, pm: PreparedModality, structural: bool) -> ModalityArtifacts:
        g = self.mods[k]
        mc = self.cfg.modalities[k]
        if pm.values_flat.shape != (mc.n * mc.m, mc.d_x):
            raise ContractError(
                f"modality {k} token shape {pm.values_flat.shape} does not match "
                f"config {(mc.n * mc.m, mc.d_x)}")
        if pm.row_indices.min() < 0 or pm.row_indices.max() >= mc.table_rows:
            raise ContractError(
                f"unknown node identity for modality {k}: rows {pm.row_indices} "
                f"outside table of {mc.table_rows}")
        x_emb = embed_signals(Tensor.const(pm.values_flat), g["sig_w"], g["sig_b"])
        s_emb = embed_spatial(Tensor.const(pm.positions), pm.node_of_token,
                              g["sp_w"], g["sp_b"])
        r_emb = None
        if structural:
            r_emb = embed_structural(pm.row_indices, g["table"], pm.node_of_token,
                                     g["st_w"], g["st_b"])
        p_emb = Tensor.const(g["pos_table"][pm.token_of_slot])
        combined = combine(x_emb, s_emb, r_emb, p_emb)
        return ModalityArtifacts(x_emb, s_emb, r_emb, p_emb, combined, np.empty(0, dtype=np.intp))

    def encode(self, prep: PreparedSample, masks: list[TokenMask],
               structural: bool = True) -> ForwardArtifacts:
        if len(masks) != len(prep.mods):
            raise ContractError("one mask per modality required")
        arts = []
        z_list = []
        for k, pm in enumerate(prep.mods):
            art = self._embed_modality(k, pm, structural)
            vis = masks[k].visible_flat()
            if vis.size == 0:
                raise ContractError(f"modality {k} has zero visible tokens")
            if pm.missing.reshape(-1)[vis].any():
                raise ContractError(f"modality {k} mask exposes missing tokens to the encoder")
            art.visible_idx = vis
            tokens = rows_gather(art.combined, vis)
            art.z = encoder_stack(tokens, self.mods[k]["enc"])
            z_list.append(art.z)
            arts.append(art)
        fused = encoder_stack(concat_rows(z_list) if len(z_list) > 1 else z_list[0], self.joint)
        offset = 0
        for art in arts:
            t = art.visible_idx.size
            art.z_tilde = rows_gather(fused, np.arange(offset, offset + t))
            offset += t
        return ForwardArtifacts(arts, masks)

    def _decoder_input(self, z_tilde: Tensor, placeholder: Tensor,
                       visible_idx: np.ndarray, k: int) -> Tensor:
        g = self.mods[k]
        proj = affine_rows(z_tilde, g["proj_w"], g["proj_b"])
        total = placeholder.shape[0]
        perm = np.arange(total) + visible_idx.size  # default: placeholder rows
        perm[visible_idx] = np.arange(visible_idx.size)
        return rows_gather(concat_rows([proj, placeholder]), perm)

    def decode_signals(self, art: ForwardArtifacts) -> None:
        for k, ma in enumerate(art.mods):
            g = self.mods[k]
            placeholder = add(ma.s_emb, ma.p_emb)
            if ma.r_emb is not None:
                placeholder = add(placeholder, ma.r_emb)
            ma.sig_dec_in = self._decoder_input(ma.z_tilde, placeholder, ma.visible_idx, k)
            out = encoder_stack(ma.sig_dec_in, g["sig_dec"])
            ma.x_hat = affine_rows(out, g["sig_head_w"], g["sig_head_b"])

    def decode_spatial(self, art: ForwardArtifacts) -> None:
        for k, ma in enumerate(art.mods):
            g = self.mods[k]
            placeholder = add(ma.x_emb, ma.p_emb)
            if ma.r_emb is not None:
                placeholder = add(placeholder, ma.r_emb)
            ma.sp_dec_in = self._decoder_input(ma.z_tilde, placeholder, ma.visible_idx, k)
            out = encoder_stack(ma.sp_dec_in, g["sp_dec"])
            ma.s_hat = affine_rows(out, g["sp_head_w"], g["sp_head_b"])

    def pretrain_loss(self, prep: PreparedSample, masks: list[TokenMask],
                      structural: bool = True,
                      spatial_objective: bool = True) -> ForwardArtifacts:
        """Forward pass plus the combined masked reconstruction loss."""
        art = self.encode(prep, masks, structural=structural)
        self.decode_signals(art)
        if spatial_objective:
            self.decode_spatial(art)
        total = None
        sig_val = 0.0
        sp_val = 0.0
        for k, (ma, pm, mask) in enumerate(zip(art.mods, prep.mods, masks)):
            hidden = mask.hidden_flat()
            if hidden.size == 0:
                logger.warning("modality %d has no hidden non-missing slots; "
                               "loss contribution is zero", k)
                continue
            mc = self.cfg.modalities[k]
            diff = sub(ma.x_hat, Tensor.const(pm.values_flat))
            picked = rows_gather(diff, hidden)
            term = scale(sum_all(mul(picked, picked)), 1.0 / (hidden.size * mc.d_x))
            sig_val += float(term.data)
            total = term if total is None else add(total, term)
            if spatial_objective:
                targets = pm.positions[pm.node_of_token]
                sdiff = sub(ma.s_hat, Tensor.const(targets))
                spicked = rows_gather(sdiff, hidden)
                sterm = scale(sum_all(mul(spicked, spicked)),
                              1.0 / (hidden.size * self.cfg.d_s))
                sp_val += float(sterm.data)
                total = add(total, sterm)
        if total is None:
            total = sum_all(mul(Tensor.zeros((1, 1)), Tensor.zeros((1, 1))))
        art.loss = total
        art.signal_term = sig_val
        art.spatial_term = sp_val
        return art

    # -- frozen-model extraction -------------------------------------------

    def encode_tokens(self, prep: PreparedSample, masks=None, structural: bool = True):
        """Post-fusion latent tokens per modality (no tape when called bare)."""
        if masks is None:
            masks = full_visibility_masks(prep)
        art = self.encode(prep, masks, structural=structural)
        return [(ma.z_tilde, ma.visible_idx) for ma in art.mods]

    def representation(self, prep: PreparedSample, masks=None, structural: bool = True):
        """Pooled per-modality vectors and their concatenation.

        Runs with full visibility by default; the encoders see every
        non-missing token and each modality is mean-pooled over its latents.
        """
        tokens = self.encode_tokens(prep, masks, structural=structural)
        pooled = [mean_pool(z).data.reshape(-1) for z, _ in tokens]
        return pooled, np.concatenate(pooled)

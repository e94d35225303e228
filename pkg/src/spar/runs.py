"""Glue from a RunConfig to the objects each stage needs."""

from __future__ import annotations

from .autodiff import ContractError
from .config import RunConfig
from .data import DatasetMeta
from .model import ModelConfig
from .synth import SynthConfig, default_modalities
from .train_eval import HeadConfig, PretrainConfig


def synth_config(rc: RunConfig) -> SynthConfig:
    mods = default_modalities(nodes=rc.data_nodes, tokens=rc.data_tokens,
                              token_dim=rc.data_token_dim, noise=rc.data_noise)
    if not 1 <= rc.data_modalities <= len(mods):
        raise ContractError(
            f"data.modalities must be between 1 and {len(mods)}, got {rc.data_modalities}")
    return SynthConfig(
        area_halfwidth=rc.data_area,
        classes=rc.data_classes,
        layout_pool=rc.data_layout_pool,
        samples=rc.data_samples,
        seed=rc.seed,
        gain_range=(rc.data_gain_min, rc.data_gain_max),
        modalities=mods[:rc.data_modalities],
    )


def model_config(rc: RunConfig, meta: DatasetMeta) -> ModelConfig:
    return ModelConfig.for_dataset(
        meta,
        d=rc.model_d,
        heads=rc.model_heads,
        enc_layers=rc.model_layers,
        joint_layers=rc.model_joint_layers,
        dec_layers=rc.model_dec_layers,
        d_ff=rc.model_d_ff,
        d_r=rc.model_d_r,
    )


def pretrain_config(rc: RunConfig) -> PretrainConfig:
    return PretrainConfig(
        steps=rc.train_steps,
        batch=rc.train_batch,
        lr=rc.train_lr,
        mask_strategy=rc.mask_strategy,
        mask_ratio=rc.mask_ratio,
        min_visible_per_node=rc.mask_min_visible,
        node_drop_count=rc.mask_node_drop,
        augment=rc.aug_enabled,
        spatial_objective=rc.loss_spatial_enabled,
        structural=rc.embed_structural_enabled,
        seed=rc.seed,
    )


def head_config(rc: RunConfig) -> HeadConfig:
    return HeadConfig(steps=rc.head_steps, batch=rc.head_batch, lr=rc.head_lr)


def probe_config(rc: RunConfig) -> HeadConfig:
    return HeadConfig(steps=rc.probe_steps, batch=rc.head_batch, lr=rc.probe_lr)


def split_train_eval(samples, frac: float):
    cut = int(frac * len(samples))
    return samples[:cut], samples[cut:]

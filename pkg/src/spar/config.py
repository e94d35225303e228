"""Plain-text run configuration: ``key = value`` lines, ``#`` comments.

Every key has a documented default; unknown keys are rejected so a typo in
an experiment recipe fails loudly.  The effective configuration is echoed
into the run directory and re-parses to the identical object.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .autodiff import ContractError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ContractError(f"expected a boolean, got {text!r}")


@dataclass
class RunConfig:
    # model geometry
    model_d: int = 64
    model_heads: int = 4
    model_layers: int = 2
    model_joint_layers: int = 1
    model_dec_layers: int = 1
    model_d_ff: int = 128
    model_d_r: int = 8
    # synthetic data
    data_modalities: int = 2
    data_nodes: int = 6
    data_tokens: int = 8
    data_token_dim: int = 16
    data_layout_pool: int = 4
    data_samples: int = 256
    data_classes: int = 4
    data_area: float = 20.0
    data_gain_min: float = 0.5
    data_gain_max: float = 2.0
    data_noise: float = 0.02
    data_train_frac: float = 0.8
    # masking
    mask_strategy: str = "random"
    mask_ratio: float = 0.75
    mask_min_visible: int = 1
    mask_node_drop: int = 1
    # pretraining
    train_steps: int = 500
    train_lr: float = 1e-3
    train_batch: int = 8
    # heads and probes
    head_steps: int = 300
    head_lr: float = 1e-2
    head_batch: int = 8
    probe_steps: int = 250
    probe_lr: float = 1e-3
    # ablation switches
    aug_enabled: bool = True
    loss_spatial_enabled: bool = True
    embed_structural_enabled: bool = True
    seed: int = 0


# config-file key -> (dataclass field, parser)
_KEYS = {
    "model.d": ("model_d", int),
    "model.heads": ("model_heads", int),
    "model.layers": ("model_layers", int),
    "model.joint_layers": ("model_joint_layers", int),
    "model.dec_layers": ("model_dec_layers", int),
    "model.d_ff": ("model_d_ff", int),
    "model.d_r": ("model_d_r", int),
    "data.modalities": ("data_modalities", int),
    "data.nodes": ("data_nodes", int),
    "data.tokens": ("data_tokens", int),
    "data.token_dim": ("data_token_dim", int),
    "data.layout_pool": ("data_layout_pool", int),
    "data.samples": ("data_samples", int),
    "data.classes": ("data_classes", int),
    "data.area": ("data_area", float),
    "data.gain_min": ("data_gain_min", float),
    "data.gain_max": ("data_gain_max", float),
    "data.noise": ("data_noise", float),
    "data.train_frac": ("data_train_frac", float),
    "mask.strategy": ("mask_strategy", str),
    "mask.ratio": ("mask_ratio", float),
    "mask.min_visible": ("mask_min_visible", int),
    "mask.node_drop": ("mask_node_drop", int),
    "train.steps": ("train_steps", int),
    "train.lr": ("train_lr", float),
    "train.batch": ("train_batch", int),
    "head.steps": ("head_steps", int),
    "head.lr": ("head_lr", float),
    "head.batch": ("head_batch", int),
    "probe.steps": ("probe_steps", int),
    "probe.lr": ("probe_lr", float),
    "aug.enabled": ("aug_enabled", _bool),
    "loss.spatial_enabled": ("loss_spatial_enabled", _bool),
    "embed.structural_enabled": ("embed_structural_enabled", _bool),
    "seed": ("seed", int),
}

_FIELD_TO_KEY = {f: k for k, (f, _) in _KEYS.items()}


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno} is not 'key = value': {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ContractError(f"unknown config key on line {lineno}: {key!r}")
        attr, conv = _KEYS[key]
        try:
            setattr(cfg, attr, conv(value))
        except ContractError:
            raise
        except ValueError as e:
            raise ContractError(f"bad value for {key!r} on line {lineno}: {value!r} ({e})")
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def config_text(cfg: RunConfig) -> str:
    """The effective configuration in the same key=value format it parses from."""
    lines = []
    for f in fields(RunConfig):
        key = _FIELD_TO_KEY[f.name]
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

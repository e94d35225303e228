"""Synthetic distributed-sensing data generator.

Point sources emit class-specific decaying sinusoids; spatially placed nodes
observe delayed, distance-attenuated, node-colored, noisy versions.  Each
node has a gain and a spectral-tilt coefficient, the "structural" traits the
learnable per-node vectors are meant to capture.  Two modalities with
different propagation speeds and sample rates exercise the joint encoder.

Generation is a pure function of configuration and seed: scenes come from
one stream, and sample ``i`` uses an rng seeded by ``(seed, i)``, so samples
can be produced independently and in any order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .data import (
    Dataset,
    DatasetMeta,
    ModalityMeta,
    SpatialLayout,
    SyntheticSample,
    TokenGrid,
)


@dataclass(frozen=True)
class ModalityPhysics:
    name: str
    nodes: int
    tokens: int
    token_dim: int
    sample_rate: float
    wave_speed: float
    noise_sigma: float


@dataclass(frozen=True)
class SynthConfig:
    area_halfwidth: float = 20.0
    spatial_dim: int = 2
    classes: int = 4
    layout_pool: int = 4
    samples: int = 256
    seed: int = 0
    gain_range: tuple[float, float] = (0.5, 2.0)
    tilt_range: tuple[float, float] = (-0.5, 0.5)
    amp_range: tuple[float, float] = (0.5, 2.0)
    reference_distance: float = 10.0
    base_frequency: float = 10.0
    frequency_step: float = 6.0
    modalities: tuple[ModalityPhysics, ...] = ()

    def __post_init__(self):
        if not self.modalities:
            object.__setattr__(self, "modalities", default_modalities())

    def class_signature(self, cls: int) -> tuple[float, float]:
        """Base frequency and envelope decay time for one source class."""
        freq = self.base_frequency + self.frequency_step * cls
        decay = 0.08 + 0.05 * cls
        return freq, decay


def default_modalities(nodes: int = 6, tokens: int = 8, token_dim: int = 16,
                       noise: float = 0.02) -> tuple[ModalityPhysics, ...]:
    return (
        ModalityPhysics("fast", nodes, tokens, token_dim, 512.0, 340.0, noise),
        ModalityPhysics("slow", nodes, tokens, token_dim, 128.0, 80.0, noise),
    )


@dataclass
class SceneSpec:
    """One deployment: per-modality node placements and node characteristics."""

    scene_id: int
    positions: list[np.ndarray]  # per modality (n, d_s) meters
    gains: list[np.ndarray]      # per modality (n,)
    tilts: list[np.ndarray]      # per modality (n,)


@dataclass
class SourceEvent:
    position: np.ndarray  # (d_s,) meters
    class_id: int
    amplitude: float


def sample_scene(cfg: SynthConfig, scene_id: int, rng: np.random.Generator) -> SceneSpec:
    """Draw node placements and per-node characteristics for one deployment."""
    g_min, g_max = cfg.gain_range
    positions, gains, tilts = [], [], []
    for mp in cfg.modalities:
        if mp.nodes < 2:
            raise ContractError(f"modality {mp.name!r} needs at least 2 nodes")
        positions.append(rng.uniform(-cfg.area_halfwidth, cfg.area_halfwidth,
                                     size=(mp.nodes, cfg.spatial_dim)))
        gains.append(np.exp(rng.uniform(np.log(g_min), np.log(g_max), size=mp.nodes)))
        tilts.append(rng.uniform(cfg.tilt_range[0], cfg.tilt_range[1], size=mp.nodes))
    return SceneSpec(scene_id, positions, gains, tilts)


def synthesize(cfg: SynthConfig, scene: SceneSpec, event: SourceEvent,
               rng: np.random.Generator) -> list[np.ndarray]:
    """Per-node waveforms for every modality.

    Node i of a modality with speed c observes
    ``g_i * A / (1 + r_i/r0) * phi_cls(t - r_i/c; beta_i) + noise`` where
    ``phi_cls`` is a causal decaying sinusoid whose second harmonic is scaled
    by the node's tilt.  Arrivals outside the sampling window truncate away.
    """
    if np.abs(event.position).max() > cfg.area_halfwidth:
        raise ContractError("source event lies outside the monitored area")
    out = []
    freq, decay = cfg.class_signature(event.class_id)
    for k, mp in enumerate(cfg.modalities):
        n = mp.nodes
        length = mp.tokens * mp.token_dim
        t = np.arange(length) / mp.sample_rate
        dists = np.linalg.norm(scene.positions[k] - event.position, axis=1)
        waves = np.empty((n, length))
        for i in range(n):
            tau = t - dists[i] / mp.wave_speed
            causal = tau >= 0.0
            envelope = np.where(causal, np.exp(-np.maximum(tau, 0.0) / decay), 0.0)
            carrier = np.sin(2.0 * np.pi * freq * tau)
            harmonic = scene.tilts[k][i] * np.sin(4.0 * np.pi * freq * tau)
            atten = event.amplitude / (1.0 + dists[i] / cfg.reference_distance)
            waves[i] = scene.gains[k][i] * atten * envelope * (carrier + harmonic)
        if mp.noise_sigma > 0:
            waves += rng.normal(0.0, mp.noise_sigma, size=waves.shape)
        out.append(waves)
    return out


def tokenize(waveform: np.ndarray, m: int, d_x: int) -> np.ndarray:
    """Split one window into m segments of d_x samples, standardized by the
    window's global mean and std (std floor 1e-9)."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.shape != (m * d_x,):
        raise ContractError(
            f"waveform length {waveform.shape} does not match {m} x {d_x}")
    std = max(float(waveform.std()), 1e-9)
    z = (waveform - waveform.mean()) / std
    return z.reshape(m, d_x)


_SCENE_STREAM = 1 << 40  # keeps the scene stream clear of per-sample streams


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng((seed, index))


def make_dataset(cfg: SynthConfig) -> Dataset:
    """Fixed pool of scenes; every sample draws a scene and a source event."""
    if cfg.samples <= 0 or cfg.layout_pool <= 0:
        raise ContractError("sample and layout-pool counts must be positive")
    scene_rng = np.random.default_rng((cfg.seed, _SCENE_STREAM))
    scenes = [sample_scene(cfg, s, scene_rng) for s in range(cfg.layout_pool)]
    meta = DatasetMeta(
        spatial_dim=cfg.spatial_dim,
        classes=cfg.classes,
        layout_pool=cfg.layout_pool,
        area_halfwidth=cfg.area_halfwidth,
        seed=cfg.seed,
        modalities=tuple(
            ModalityMeta(mp.name, mp.nodes, mp.tokens, mp.token_dim,
                         mp.sample_rate, mp.wave_speed)
            for mp in cfg.modalities),
    )
    samples = []
    a_min, a_max = cfg.amp_range
    for idx in range(cfg.samples):
        rng = _sample_rng(cfg.seed, idx)
        scene = scenes[int(rng.integers(cfg.layout_pool))]
        event = SourceEvent(
            position=rng.uniform(-cfg.area_halfwidth, cfg.area_halfwidth,
                                 size=cfg.spatial_dim),
            class_id=int(rng.integers(cfg.classes)),
            amplitude=float(np.exp(rng.uniform(np.log(a_min), np.log(a_max)))),
        )
        waves = synthesize(cfg, scene, event, rng)
        grids, layouts, node_ids = [], [], []
        for k, mp in enumerate(cfg.modalities):
            tokens = np.stack([tokenize(waves[k][i], mp.tokens, mp.token_dim)
                               for i in range(mp.nodes)])
            grids.append(TokenGrid(k, tokens, np.zeros((mp.nodes, mp.tokens), dtype=bool)))
            layouts.append(SpatialLayout(scene.positions[k].copy()))
            node_ids.append(scene.scene_id * mp.nodes + np.arange(mp.nodes))
        samples.append(SyntheticSample(
            scene=scene.scene_id,
            label_class=event.class_id,
            source_pos=event.position,
            amplitude=event.amplitude,
            seed=idx,
            grids=grids,
            layouts=layouts,
            node_ids=node_ids,
        ))
    return Dataset(meta, samples)


def apply_message_drop(sample: SyntheticSample, p_drop: float,
                       rng: np.random.Generator) -> SyntheticSample:
    """Independently drop whole nodes with probability ``p_drop``.

    A dropped node has all tokens flagged missing and zeroed.  The drop
    pattern of a modality is resampled if it would kill every node, so at
    least one survives per modality.
    """
    if not 0.0 <= p_drop < 1.0:
        raise ContractError(f"drop probability must be in [0, 1), got {p_drop}")
    grids = []
    for grid in sample.grids:
        if p_drop == 0.0:
            grids.append(TokenGrid(grid.modality, grid.values.copy(), grid.missing.copy()))
            continue
        while True:
            dropped = rng.random(grid.n) < p_drop
            if not dropped.all():
                break
        missing = grid.missing | dropped[:, None]
        values = grid.values.copy()
        values[missing] = 0.0
        grids.append(TokenGrid(grid.modality, values, missing))
    return SyntheticSample(
        scene=sample.scene,
        label_class=sample.label_class,
        source_pos=sample.source_pos.copy(),
        amplitude=sample.amplitude,
        seed=sample.seed,
        grids=grids,
        layouts=[SpatialLayout(l.coords.copy()) for l in sample.layouts],
        node_ids=[ids.copy() for ids in sample.node_ids],
    )

"""Pretraining loop, frozen-encoder heads, and evaluation protocols.

The encoder is trained once on unlabeled samples; afterwards it is frozen
and every downstream consumer works from extracted representations: a
localization head (one transformer layer over the per-modality pooled
latents plus a linear map), a linear classifier, a token-level spatial probe,
occlusion-similarity and message-drop diagnostics, and the unseen-placement
protocol with structural-vector substitution.

Directional comparisons (augmentation on/off, ablations, pretrained vs
random) are always run as paired comparisons with common seeds.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    ContractError,
    ParamSet,
    Tensor,
    add,
    adam_step,
    backward,
    log_softmax_rows,
    mul,
    scale,
    sub,
    sum_all,
    Tape,
)
from .data import Dataset, _atomic_write
from .embedding import affine_rows
from .masking import TokenMask, complement, node_balanced_mask, node_drop_mask, random_mask
from .model import SparModel, prepare_sample
from .synth import apply_message_drop
from .transformer import StackConfig, StackParams, encoder_stack, mean_pool

MASK_STRATEGIES = ("random", "node-balanced", "node-drop")
PROBE_NOISE_GRID = (0.0, 0.1, 0.2, 0.4, 0.8)
DROP_RATES = (0.05, 0.1, 0.2)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    batch: int = 8
    lr: float = 1e-3
    mask_strategy: str = "random"
    mask_ratio: float = 0.75
    min_visible_per_node: int = 1
    node_drop_count: int = 1
    augment: bool = True
    spatial_objective: bool = True
    structural: bool = True
    seed: int = 0
    fixed_batch: bool = False  # re-draw the same batch/masks every step (tests)

    def __post_init__(self):
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ContractError(
                f"mask strategy must be one of {MASK_STRATEGIES}, got {self.mask_strategy!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ContractError(f"mask ratio must be in (0, 1), got {self.mask_ratio}")


@dataclass(frozen=True)
class HeadConfig:
    steps: int = 300
    batch: int = 8
    lr: float = 1e-2
    heads: int = 2


@dataclass
class HistoryRow:
    step: int
    loss: float
    signal_term: float
    spatial_term: float


@dataclass
class PretrainResult:
    history: list[HistoryRow]
    scenes_seen: set[int]


@dataclass
class Metrics:
    mse: float | None = None
    dist_err: float | None = None
    accuracy: float | None = None
    macro_f1: float | None = None


def build_mask(grid, cfg: PretrainConfig, rng: np.random.Generator) -> TokenMask:
    if cfg.mask_strategy == "random":
        return random_mask(grid, cfg.mask_ratio, rng)
    if cfg.mask_strategy == "node-balanced":
        return node_balanced_mask(grid, cfg.mask_ratio, cfg.min_visible_per_node, rng)
    return node_drop_mask(grid, cfg.node_drop_count, rng)


def pretrain(model: SparModel, dataset: Dataset, cfg: PretrainConfig,
             forbidden_scenes: set[int] | None = None) -> PretrainResult:
    """Masked-reconstruction pretraining; aborts on a non-finite loss."""
    samples = dataset.samples
    if not samples:
        raise ContractError("pretraining needs a non-empty dataset")
    history = []
    scenes_seen: set[int] = set()
    for step in range(cfg.steps):
        srng = np.random.default_rng((cfg.seed, 0 if cfg.fixed_batch else step))
        take = min(cfg.batch, len(samples))
        idx = srng.choice(len(samples), size=take, replace=False)
        total = None
        sig_sum = 0.0
        sp_sum = 0.0
        with Tape():
            for i in idx:
                s = samples[int(i)]
                scenes_seen.add(s.scene)
                if forbidden_scenes and s.scene in forbidden_scenes:
                    raise ContractError(
                        f"scene {s.scene} is excluded from pretraining but entered a batch")
                prep = prepare_sample(s, augment=cfg.augment, rng=srng)
                masks = [build_mask(g, cfg, srng) for g in s.grids]
                art = model.pretrain_loss(prep, masks, structural=cfg.structural,
                                          spatial_objective=cfg.spatial_objective)
                sig_sum += art.signal_term
                sp_sum += art.spatial_term
                total = art.loss if total is None else add(total, art.loss)
            total = scale(total, 1.0 / take)
            loss_val = float(total.data)
            if not math.isfinite(loss_val):
                norms = {p.name: float(np.linalg.norm(p.value.data)) for p in model.params}
                worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
                raise TrainingDiverged(
                    f"non-finite loss at step {step}; largest parameter norms: {worst}")
            backward(total, model.params)
        adam_step(model.params, cfg.lr)
        history.append(HistoryRow(step, loss_val, sig_sum / take, sp_sum / take))
    return PretrainResult(history, scenes_seen)


# -- representation extraction ----------------------------------------------


@dataclass
class SampleFeatures:
    tokens: np.ndarray       # (K, d) pooled per-modality latents
    flat: np.ndarray         # (K*d,)
    target_norm: np.ndarray  # source position in the normalized frame
    mean: np.ndarray
    pos_scale: float
    label_class: int
    source_pos: np.ndarray


def extract_features(model: SparModel, samples, structural: bool = True,
                     substitution=None) -> list[SampleFeatures]:
    """Frozen-model pooled representations plus localization targets.

    The normalized frame of the first modality's layout defines the
    localization target; predictions are mapped back to meters with the
    stored (mean, scale) when metrics are computed.
    """
    out = []
    for s in samples:
        prep = prepare_sample(s, augment=False, substitution=substitution)
        pooled, flat = model.representation(prep, structural=structural)
        layout = prep.mods[0].layout
        target = (s.source_pos - layout.mean) / layout.scale
        out.append(SampleFeatures(
            tokens=np.stack(pooled),
            flat=flat,
            target_norm=target,
            mean=layout.mean,
            pos_scale=layout.scale,
            label_class=s.label_class,
            source_pos=s.source_pos,
        ))
    return out


# -- localization head --------------------------------------------------------


class LocalizationHead:
    """One transformer layer over K pooled tokens, then a linear map."""

    def __init__(self, d: int, d_s: int, heads: int, seed: int):
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        self.stack = StackParams(self.params, "head",
                                 StackConfig(d, heads, 1, 2 * d), rng)
        self.out_w = self.params.make("head.out.w", rng.normal(0.0, 0.02, (d, d_s)))
        self.out_b = self.params.make("head.out.b", np.zeros(d_s))

    def predict_tensor(self, tokens: np.ndarray) -> Tensor:
        h = encoder_stack(Tensor.const(tokens), self.stack)
        return affine_rows(mean_pool(h), self.out_w, self.out_b)

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        return self.predict_tensor(tokens).data.reshape(-1)


def fit_localization_head(features: list[SampleFeatures], cfg: HeadConfig,
                          seed: int) -> LocalizationHead:
    if not features:
        raise ContractError("cannot fit a head on an empty labeled set")
    d = features[0].tokens.shape[1]
    d_s = features[0].target_norm.shape[0]
    head = LocalizationHead(d, d_s, cfg.heads, seed)
    rng = np.random.default_rng((seed, 1))
    for _ in range(cfg.steps):
        idx = rng.choice(len(features), size=min(cfg.batch, len(features)), replace=False)
        with Tape():
            total = None
            for i in idx:
                f = features[int(i)]
                diff = sub(head.predict_tensor(f.tokens), Tensor.const(f.target_norm[None, :]))
                term = sum_all(mul(diff, diff))
                total = term if total is None else add(total, term)
            total = scale(total, 1.0 / (len(idx) * d_s))
            backward(total, head.params)
        adam_step(head.params, cfg.lr)
    return head


def localization_metrics(head: LocalizationHead, features: list[SampleFeatures]) -> Metrics:
    """MSE (meters^2) and mean Euclidean distance error (meters)."""
    sq = []
    dist = []
    for f in features:
        pred_m = head.predict(f.tokens) * f.pos_scale + f.mean
        err = float(np.linalg.norm(pred_m - f.source_pos))
        sq.append(err ** 2)
        dist.append(err)
    return Metrics(mse=float(np.mean(sq)), dist_err=float(np.mean(dist)))


def finetune_localization(model: SparModel, train_samples, eval_samples,
                          ratio: float = 1.0, cfg: HeadConfig = HeadConfig(),
                          seed: int = 0, structural: bool = True,
                          substitution=None):
    """Fit the localization head on a labeled fraction; encoder stays frozen."""
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"label ratio must be in (0, 1], got {ratio}")
    count = int(math.floor(ratio * len(train_samples)))
    if count == 0:
        raise ContractError("label ratio leaves an empty labeled subset")
    order = np.random.default_rng((seed, 2)).permutation(len(train_samples))
    subset = [train_samples[int(i)] for i in order[:count]]
    train_feats = extract_features(model, subset, structural=structural,
                                   substitution=substitution)
    eval_feats = extract_features(model, eval_samples, structural=structural,
                                  substitution=substitution)
    head = fit_localization_head(train_feats, cfg, seed)
    return head, localization_metrics(head, eval_feats)


# -- classification head -------------------------------------------------------


class ClassificationHead:
    def __init__(self, dim: int, classes: int, seed: int):
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        self.w = self.params.make("cls.w", rng.normal(0.0, 0.02, (dim, classes)))
        self.b = self.params.make("cls.b", np.zeros(classes))
        self.classes = classes

    def logits(self, flats: np.ndarray) -> Tensor:
        return affine_rows(Tensor.const(flats), self.w, self.b)

    def predict(self, flats: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(flats).data, axis=1)


def fit_classification_head(features: list[SampleFeatures], classes: int,
                            cfg: HeadConfig, seed: int) -> ClassificationHead:
    labels = np.array([f.label_class for f in features])
    if np.unique(labels).size < 2:
        raise ContractError("classification fine-tuning needs at least two classes")
    flats = np.stack([f.flat for f in features])
    head = ClassificationHead(flats.shape[1], classes, seed)
    rng = np.random.default_rng((seed, 3))
    eye = np.eye(classes)
    for _ in range(cfg.steps):
        idx = rng.choice(len(features), size=min(cfg.batch, len(features)), replace=False)
        onehot = eye[labels[idx]]
        with Tape():
            logp = log_softmax_rows(head.logits(flats[idx]))
            loss = scale(sum_all(mul(logp, Tensor.const(onehot))), -1.0 / len(idx))
            backward(loss, head.params)
        adam_step(head.params, cfg.lr)
    return head


def classification_metrics(head: ClassificationHead,
                           features: list[SampleFeatures]) -> Metrics:
    labels = np.array([f.label_class for f in features])
    preds = head.predict(np.stack([f.flat for f in features]))
    return Metrics(accuracy=accuracy_score(labels, preds, head.classes),
                   macro_f1=macro_f1_score(labels, preds, head.classes))


def accuracy_score(truth: np.ndarray, pred: np.ndarray, classes: int) -> float:
    cm = confusion_matrix(truth, pred, classes)
    return float(np.trace(cm) / cm.sum())


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, classes: int) -> np.ndarray:
    cm = np.zeros((classes, classes), dtype=np.int64)
    for t, p in zip(truth, pred):
        cm[int(t), int(p)] += 1
    return cm


def macro_f1_score(truth: np.ndarray, pred: np.ndarray, classes: int) -> float:
    """Unweighted mean of per-class F1 over all configured classes.

    A class absent from both truth and predictions scores 0 and still
    counts toward the average.
    """
    cm = confusion_matrix(truth, pred, classes)
    f1s = []
    for c in range(classes):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))


def finetune_classification(model: SparModel, train_samples, eval_samples,
                            classes: int, cfg: HeadConfig = HeadConfig(),
                            seed: int = 0, structural: bool = True):
    train_feats = extract_features(model, train_samples, structural=structural)
    eval_feats = extract_features(model, eval_samples, structural=structural)
    head = fit_classification_head(train_feats, classes, cfg, seed)
    return head, classification_metrics(head, eval_feats)


# -- spatial probe -------------------------------------------------------------


class SpatialProbe:
    """One transformer layer plus a per-token linear map to coordinates."""

    def __init__(self, d: int, d_s: int, heads: int, seed: int):
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        self.stack = StackParams(self.params, "probe",
                                 StackConfig(d, heads, 1, 2 * d), rng)
        self.out_w = self.params.make("probe.out.w", rng.normal(0.0, 0.02, (d, d_s)))
        self.out_b = self.params.make("probe.out.b", np.zeros(d_s))

    def predict_tensor(self, tokens: np.ndarray) -> Tensor:
        h = encoder_stack(Tensor.const(tokens), self.stack)
        return affine_rows(h, self.out_w, self.out_b)


def _probe_items(model: SparModel, samples, eta: float, seed: int,
                 structural: bool):
    """(latent tokens, perturbed-position targets) per sample at noise eta."""
    items = []
    for j, s in enumerate(samples):
        rng = np.random.default_rng((seed, 4, j))
        prep = prepare_sample(s, augment=False)
        for pm in prep.mods:
            noise = rng.uniform(-eta, eta, size=pm.positions.shape) if eta > 0 else 0.0
            pm.positions = pm.positions + noise
        token_list = model.encode_tokens(prep, structural=structural)
        seqs, targs = [], []
        for pm, (z, vis) in zip(prep.mods, token_list):
            seqs.append(z.data)
            targs.append(pm.positions[pm.node_of_token[vis]])
        items.append((np.concatenate(seqs, axis=0), np.concatenate(targs, axis=0)))
    return items


def _fit_probe(items, cfg: HeadConfig, seed: int) -> SpatialProbe:
    d = items[0][0].shape[1]
    d_s = items[0][1].shape[1]
    probe = SpatialProbe(d, d_s, cfg.heads, seed)
    rng = np.random.default_rng((seed, 5))
    for _ in range(cfg.steps):
        idx = rng.choice(len(items), size=min(cfg.batch, len(items)), replace=False)
        with Tape():
            total = None
            count = 0
            for i in idx:
                tokens, targets = items[int(i)]
                diff = sub(probe.predict_tensor(tokens), Tensor.const(targets))
                term = sum_all(mul(diff, diff))
                total = term if total is None else add(total, term)
                count += targets.size
            total = scale(total, 1.0 / count)
            backward(total, probe.params)
        adam_step(probe.params, cfg.lr)
    return probe


def _probe_error(probe: SpatialProbe, items) -> float:
    errs = []
    for tokens, targets in items:
        pred = probe.predict_tensor(tokens).data
        errs.append(float(np.linalg.norm(pred - targets, axis=1).mean()))
    return float(np.mean(errs))


def probe_spatial(model: SparModel, train_samples, eval_samples,
                  noise_grid=PROBE_NOISE_GRID,
                  cfg: HeadConfig = HeadConfig(lr=1e-3), seed: int = 0,
                  structural: bool = True) -> list[tuple[float, float]]:
    """Per noise magnitude: freeze the encoder, fit a probe to regress the
    perturbed normalized positions from latent tokens, report mean error."""
    curve = []
    for eta in noise_grid:
        train_items = _probe_items(model, train_samples, eta, seed, structural)
        eval_items = _probe_items(model, eval_samples, eta, seed + 1, structural)
        probe = _fit_probe(train_items, cfg, seed)
        curve.append((float(eta), _probe_error(probe, eval_items)))
    return curve


def predict_mean_baseline(samples, noise_grid=PROBE_NOISE_GRID, seed: int = 0):
    """Error of always predicting the mean position, per noise magnitude."""
    out = []
    for eta in noise_grid:
        errs = []
        for j, s in enumerate(samples):
            rng = np.random.default_rng((seed, 4, j))
            prep = prepare_sample(s, augment=False)
            for pm in prep.mods:
                noise = rng.uniform(-eta, eta, size=pm.positions.shape) if eta > 0 else 0.0
                pos = pm.positions + noise
                tokens_pos = pos[pm.node_of_token]
                center = tokens_pos.mean(axis=0)
                errs.append(float(np.linalg.norm(tokens_pos - center, axis=1).mean()))
        out.append((float(eta), float(np.mean(errs))))
    return out


# -- occlusion similarity --------------------------------------------------------


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def occlusion_similarity(model: SparModel, samples, mask_ratio: float = 0.75,
                         seed: int = 0, structural: bool = True):
    """Mean cosine between complementary-view representations of the same
    sample versus views of different samples."""
    reps_a, reps_b = [], []
    for j, s in enumerate(samples):
        rng = np.random.default_rng((seed, 6, j))
        prep = prepare_sample(s, augment=False)
        masks = [random_mask(g, mask_ratio, rng) for g in s.grids]
        comp = [complement(m) for m in masks]
        _, u = model.representation(prep, masks=masks, structural=structural)
        _, v = model.representation(prep, masks=comp, structural=structural)
        reps_a.append(u)
        reps_b.append(v)
    matched = [_cosine(u, v) for u, v in zip(reps_a, reps_b)]
    n = len(samples)
    mismatched = [_cosine(reps_a[i], reps_b[(i + 1) % n]) for i in range(n)]
    return float(np.mean(matched)), float(np.mean(mismatched))


# -- message-drop robustness -------------------------------------------------------


def eval_robustness(model: SparModel, head: LocalizationHead, eval_samples,
                    rates=DROP_RATES, seed: int = 0,
                    structural: bool = True) -> dict[float, Metrics]:
    """Localization metrics when nodes drop out at each rate (0 = clean)."""
    results: dict[float, Metrics] = {}
    for rate in rates:
        dropped = []
        for j, s in enumerate(eval_samples):
            rng = np.random.default_rng((seed, 7, j))
            dropped.append(apply_message_drop(s, rate, rng))
        feats = extract_features(model, dropped, structural=structural)
        results[float(rate)] = localization_metrics(head, feats)
    return results


# -- unseen placement ---------------------------------------------------------------


def structural_substitution(dataset: Dataset, holdout_scene: int,
                            seed: int) -> dict[int, int]:
    """Map each held-out node identity to one learned during pretraining."""
    n_per_scene = {mm.nodes for mm in dataset.meta.modalities}
    rng = np.random.default_rng((seed, 8))
    sub: dict[int, int] = {}
    for n in sorted(n_per_scene):
        held = [holdout_scene * n + i for i in range(n)]
        learned = [s * n + i for s in range(dataset.meta.layout_pool)
                   if s != holdout_scene for i in range(n)]
        for node in held:
            sub[node] = int(rng.choice(learned))
    return sub


@dataclass
class UnseenPlacementResult:
    augmented: Metrics
    unaugmented: Metrics
    holdout_scene: int
    pretrain_scenes: dict[bool, set[int]] = field(default_factory=dict)


def eval_unseen_placement(dataset: Dataset, model_cfg, pretrain_cfg: PretrainConfig,
                          head_cfg: HeadConfig, holdout_scene: int, seed: int,
                          train_frac: float = 0.8) -> UnseenPlacementResult:
    """Pretrain without one layout, fine-tune/evaluate on it; runs the
    augmentation-on and augmentation-off variants as a paired comparison."""
    if dataset.meta.layout_pool < 3:
        raise ContractError("unseen-placement protocol needs a layout pool of >= 3")
    pool = [s for s in dataset.samples if s.scene != holdout_scene]
    held = [s for s in dataset.samples if s.scene == holdout_scene]
    if not pool or not held:
        raise ContractError(f"holdout scene {holdout_scene} leaves an empty split")
    cut = int(train_frac * len(held))
    held_train, held_eval = held[:cut], held[cut:]
    sub = structural_substitution(dataset, holdout_scene, seed)

    results = {}
    scenes = {}
    for aug in (True, False):
        model = SparModel(model_cfg, seed=seed)
        pcfg = replace(pretrain_cfg, augment=aug, seed=seed)
        res = pretrain(model, Dataset(dataset.meta, pool), pcfg,
                       forbidden_scenes={holdout_scene})
        if holdout_scene in res.scenes_seen:
            raise ContractError("holdout scene leaked into pretraining")
        scenes[aug] = res.scenes_seen
        _, metrics = finetune_localization(
            model, held_train, held_eval, ratio=1.0, cfg=head_cfg, seed=seed,
            structural=pcfg.structural, substitution=sub)
        results[aug] = metrics
    return UnseenPlacementResult(results[True], results[False], holdout_scene, scenes)


# -- CSV emission --------------------------------------------------------------------


METRIC_COLUMNS = ("protocol", "variant", "seed", "mse", "dist_err", "accuracy", "macro_f1")


def _write_csv(path: str, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def write_metrics_csv(path: str, rows) -> None:
    """Rows are (protocol, variant, seed, Metrics); floats use repr so
    identical runs produce byte-identical files."""
    def fmt(v):
        return "" if v is None else repr(v)

    _write_csv(path, METRIC_COLUMNS,
               [(protocol, variant, seed, fmt(m.mse), fmt(m.dist_err),
                 fmt(m.accuracy), fmt(m.macro_f1))
                for protocol, variant, seed, m in rows])


def write_history_csv(path: str, history: list[HistoryRow]) -> None:
    _write_csv(path, ("step", "loss", "signal_term", "spatial_term"),
               [(r.step, repr(r.loss), repr(r.signal_term), repr(r.spatial_term))
                for r in history])


def write_curve_csv(path: str, curve) -> None:
    _write_csv(path, ("noise", "probe_error"),
               [(repr(eta), repr(err)) for eta, err in curve])

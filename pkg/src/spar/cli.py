"""Command-line entry points.

Subcommands: simulate, pretrain, finetune, eval, probe, gradcheck.  Errors
print one machine-parsable ``ERROR: ...`` line; usage problems exit 2,
runtime contract violations exit 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import runs
from .autodiff import ContractError, Tape, grad_check
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_text, load_config
from .data import _atomic_write, load_dataset, save_dataset
from .masking import random_mask
from .model import SparModel, prepare_sample
from .synth import make_dataset
from .train_eval import (
    DROP_RATES,
    PROBE_NOISE_GRID,
    LocalizationHead,
    TrainingDiverged,
    eval_robustness,
    eval_unseen_placement,
    extract_features,
    finetune_classification,
    finetune_localization,
    localization_metrics,
    pretrain,
    probe_spatial,
    write_curve_csv,
    write_history_csv,
    write_metrics_csv,
)

GRADCHECK_TOLERANCE = 1e-4


class _CliParser(argparse.ArgumentParser):
    def error(self, message):
        print(f"ERROR: {message}", file=sys.stderr)
        self.print_usage(sys.stderr)
        raise SystemExit(2)


def _build_parser() -> _CliParser:
    parser = _CliParser(prog="spar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration file (key = value lines)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", default="spar_out", help="output directory")

    p = sub.add_parser("simulate", help="generate a synthetic dataset file")
    common(p)

    p = sub.add_parser("pretrain", help="pretrain on a dataset file")
    common(p)
    p.add_argument("--data", required=True, help="dataset file from 'simulate'")

    p = sub.add_parser("finetune", help="fit a frozen-encoder head")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="checkpoint from 'pretrain'")
    p.add_argument("--task", choices=("localization", "classification"),
                   default="localization")
    p.add_argument("--label-ratio", type=float, default=1.0)

    p = sub.add_parser("eval", help="evaluation protocols on a fine-tuned model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="encoder checkpoint (not needed for --unseen-layout)")
    p.add_argument("--head", help="localization head checkpoint; fitted fresh if absent")
    p.add_argument("--drop-rate", type=float, action="append", default=None,
                   help="message-drop rate; repeatable (default 0.05 0.1 0.2)")
    p.add_argument("--label-ratio", type=float, action="append", default=None,
                   help="label ratio sweep; repeatable")
    p.add_argument("--unseen-layout", type=int, default=None,
                   help="holdout scene id for the unseen-placement protocol")

    p = sub.add_parser("probe", help="spatial-information probe curve")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    common(p)
    return parser


def _load_run_config(args) -> RunConfig:
    rc = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        rc.seed = args.seed
    return rc


def _prepare_out(args, rc: RunConfig) -> str:
    os.makedirs(args.out, exist_ok=True)
    _atomic_write(os.path.join(args.out, "config.echo.cfg"),
                  config_text(rc).encode("utf-8"))
    return args.out


def _build_model(rc: RunConfig, meta) -> SparModel:
    return SparModel(runs.model_config(rc, meta), seed=rc.seed)


def _cmd_simulate(args) -> int:
    rc = _load_run_config(args)
    out = _prepare_out(args, rc)
    ds = make_dataset(runs.synth_config(rc))
    path = os.path.join(out, "dataset.spds")
    save_dataset(ds, path)
    print(f"wrote {len(ds.samples)} samples to {path}")
    return 0


def _cmd_pretrain(args) -> int:
    rc = _load_run_config(args)
    out = _prepare_out(args, rc)
    ds = load_dataset(args.data)
    model = _build_model(rc, ds.meta)
    result = pretrain(model, ds, runs.pretrain_config(rc))
    ckpt = os.path.join(out, "model.spar")
    save_checkpoint(model.params, ckpt)
    write_history_csv(os.path.join(out, "pretrain_loss.csv"), result.history)
    print(f"final loss {result.history[-1].loss:.6f}; checkpoint at {ckpt}")
    return 0


def _cmd_finetune(args) -> int:
    rc = _load_run_config(args)
    out = _prepare_out(args, rc)
    ds = load_dataset(args.data)
    model = _build_model(rc, ds.meta)
    load_checkpoint(model.params, args.model)
    train, eval_ = runs.split_train_eval(ds.samples, rc.data_train_frac)
    structural = rc.embed_structural_enabled
    if args.task == "localization":
        head, metrics = finetune_localization(
            model, train, eval_, ratio=args.label_ratio, cfg=runs.head_config(rc),
            seed=rc.seed, structural=structural)
        rows = [("finetune_localization", f"label_ratio={args.label_ratio}",
                 rc.seed, metrics)]
    else:
        head, metrics = finetune_classification(
            model, train, eval_, ds.meta.classes, cfg=runs.head_config(rc),
            seed=rc.seed, structural=structural)
        rows = [("finetune_classification", "full", rc.seed, metrics)]
    save_checkpoint(head.params, os.path.join(out, "head.spar"))
    write_metrics_csv(os.path.join(out, "metrics.csv"), rows)
    print(f"metrics: {metrics}")
    return 0


def _fit_or_load_head(args, rc, model, train, eval_):
    structural = rc.embed_structural_enabled
    if args.head:
        feats = extract_features(model, train[:1], structural=structural)
        head = LocalizationHead(feats[0].tokens.shape[1],
                                feats[0].target_norm.shape[0],
                                runs.head_config(rc).heads, rc.seed)
        load_checkpoint(head.params, args.head)
        return head
    head, _ = finetune_localization(model, train, eval_, ratio=1.0,
                                    cfg=runs.head_config(rc), seed=rc.seed,
                                    structural=structural)
    return head


def _cmd_eval(args) -> int:
    rc = _load_run_config(args)
    out = _prepare_out(args, rc)
    ds = load_dataset(args.data)
    rows = []
    if args.unseen_layout is not None:
        result = eval_unseen_placement(
            ds, runs.model_config(rc, ds.meta), runs.pretrain_config(rc),
            runs.head_config(rc), args.unseen_layout, rc.seed,
            train_frac=rc.data_train_frac)
        rows.append(("unseen_placement", "augmented", rc.seed, result.augmented))
        rows.append(("unseen_placement", "unaugmented", rc.seed, result.unaugmented))
    else:
        if not args.model:
            raise ContractError("eval requires --model unless --unseen-layout is used")
        model = _build_model(rc, ds.meta)
        load_checkpoint(model.params, args.model)
        train, eval_ = runs.split_train_eval(ds.samples, rc.data_train_frac)
        structural = rc.embed_structural_enabled
        for ratio in (args.label_ratio or []):
            _, metrics = finetune_localization(
                model, train, eval_, ratio=ratio, cfg=runs.head_config(rc),
                seed=rc.seed, structural=structural)
            rows.append(("label_ratio", f"ratio={ratio}", rc.seed, metrics))
        head = _fit_or_load_head(args, rc, model, train, eval_)
        clean = localization_metrics(
            head, extract_features(model, eval_, structural=structural))
        rows.append(("message_drop", "rate=0.0", rc.seed, clean))
        rates = args.drop_rate if args.drop_rate is not None else list(DROP_RATES)
        for rate, metrics in eval_robustness(model, head, eval_, rates=rates,
                                             seed=rc.seed, structural=structural).items():
            rows.append(("message_drop", f"rate={rate}", rc.seed, metrics))
    path = os.path.join(out, "metrics.csv")
    write_metrics_csv(path, rows)
    print(f"wrote {len(rows)} metric rows to {path}")
    return 0


def _cmd_probe(args) -> int:
    rc = _load_run_config(args)
    out = _prepare_out(args, rc)
    ds = load_dataset(args.data)
    model = _build_model(rc, ds.meta)
    load_checkpoint(model.params, args.model)
    train, eval_ = runs.split_train_eval(ds.samples, rc.data_train_frac)
    curve = probe_spatial(model, train, eval_, noise_grid=PROBE_NOISE_GRID,
                          cfg=runs.probe_config(rc), seed=rc.seed,
                          structural=rc.embed_structural_enabled)
    path = os.path.join(out, "probe_curve.csv")
    write_curve_csv(path, curve)
    print(f"wrote probe curve to {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    rc = _load_run_config(args)
    _prepare_out(args, rc)
    scfg = dataclasses.replace(runs.synth_config(rc), samples=2)
    ds = make_dataset(scfg)
    model = _build_model(rc, ds.meta)
    sample = ds.samples[0]
    mask_rng = np.random.default_rng(rc.seed)
    prep = prepare_sample(sample, augment=False)
    masks = [random_mask(g, rc.mask_ratio, mask_rng) for g in sample.grids]

    def loss_fn():
        with Tape():
            art = model.pretrain_loss(prep, masks)
            return art.loss

    err = grad_check(loss_fn, model.params, rng=np.random.default_rng(rc.seed))
    print(f"gradcheck max_rel_err={err:.3e}")
    return 0 if err < GRADCHECK_TOLERANCE else 1


_COMMANDS = {
    "simulate": _cmd_simulate,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "probe": _cmd_probe,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ContractError, TrainingDiverged, OSError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

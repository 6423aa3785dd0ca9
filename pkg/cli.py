"""Command-line surface: synth | train | eval | explain | prune | stats | sanity | ablate.

Exit codes: 0 success (declared artifacts exist), 2 usage/config error, 1 runtime failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from src.checkpoint import load_checkpoint, save_checkpoint
from src.compress import compression_report, count_stats, fine_tune, prune_global_l1
from src.config import LOG_LEVEL_ENV, RunConfig, RunDirectory, add_config_arguments, config_from_args, \
    load_environment
from src.cross_validation import chest_lead_ablation, run_cv
from src.data_loader import ECGDataLoader, load_evidence_mask, load_record, preprocess
from src.errors import ConfigError, LightX3ECGError
from src.explain import evidence_mass_fraction, lead_wise_explanation, sanity_check
from src.metrics import write_metrics
from src.model import LightX3ECG
from src.render import render_explanation, render_sanity_comparison
from src.synthetic import synth_dataset
from src.training import TrainConfig, evaluate_model


def _require_manifest(cfg: RunConfig) -> str:
    if not cfg.manifest:
        raise ConfigError("no manifest given; set 'manifest = ...' in the config or pass --manifest")
    return cfg.manifest


def _load_dataset(cfg: RunConfig):
    loader = ECGDataLoader(_require_manifest(cfg), leads=cfg.leads, standardize=cfg.standardize,
                           length=cfg.input_length)
    return loader.load_dataset()


def _load_checkpoint_dataset(cfg: RunConfig, model: LightX3ECG, extras: dict):
    """Load the config manifest preprocessed the way the checkpoint was trained."""
    loader = ECGDataLoader(_require_manifest(cfg), leads=extras.get("leads") or cfg.leads,
                           standardize=extras.get("standardize", cfg.standardize),
                           length=model.spec.input_length)
    return loader.load_dataset()


def _model_factory(cfg: RunConfig, n_classes: int):
    spec = cfg.model_spec(n_classes)
    return lambda round_index: LightX3ECG(spec, seed=cfg.seed * 1000 + round_index)


def cmd_synth(args) -> List[Path]:
    manifest = synth_dataset(args.out, n_per_class=args.per_class, classes=args.classes, seed=args.seed,
                             task=args.task, duration_s=args.duration_s)
    print(f"wrote {len(manifest)} records to {args.out}")
    return [Path(args.out) / "manifest.csv"]


def cmd_train(args) -> List[Path]:
    cfg = config_from_args(args)
    train_cfg = cfg.train_config()
    run = RunDirectory(cfg.runs_dir, cfg.name)
    with run.lock():
        run.write_config(cfg)
        dataset = _load_dataset(cfg)
        if dataset.task != train_cfg.task:
            raise ConfigError(f"config task '{train_cfg.task}' does not match manifest task '{dataset.task}'")
        result = run_cv(dataset, _model_factory(cfg, len(dataset.classes)), train_cfg, k=cfg.kfold,
                        folds=cfg.folds, checkpoint_dir=run.checkpoints, index_encoding=cfg.index_encoding,
                        progress=not args.quiet)
        write_metrics(result.reports(), run.metrics)
        run.report.write_text(result.mean.to_text(), encoding="utf-8")
        result.plan.to_frame().to_csv(run.root / "folds.csv", index=False, lineterminator="\n")
    print(result.mean.to_text())
    rounds = cfg.folds or cfg.kfold
    return [run.config, run.metrics, run.report] + [run.checkpoints / f"fold{r}.ckpt" for r in range(rounds)]


def _thresholds(extras: dict) -> Optional[np.ndarray]:
    return np.asarray(extras["thresholds"]) if "thresholds" in extras else None


def cmd_eval(args) -> List[Path]:
    cfg = config_from_args(args)
    model, extras = load_checkpoint(args.checkpoint)
    dataset = _load_checkpoint_dataset(cfg, model, extras)
    if dataset.task != extras.get("task", dataset.task):
        raise ConfigError(f"checkpoint task '{extras['task']}' does not match manifest task '{dataset.task}'")
    report = evaluate_model(model, dataset, _thresholds(extras))
    out = Path(args.out)
    write_metrics({"eval": report}, out)
    print(report.to_text())
    return [out]


def cmd_explain(args) -> List[Path]:
    model, extras = load_checkpoint(args.checkpoint)
    leads = tuple(extras.get("leads", ("I", "II", "V1")))
    if args.class_id is not None and not 0 <= args.class_id < model.spec.n_classes:
        raise ConfigError(f"class id {args.class_id} out of range [0, {model.spec.n_classes})")
    record = load_record(args.record)
    standardize = extras.get("standardize", True) and not args.raw
    x = preprocess(record, leads, model.spec.input_length, standardize=standardize).x
    explanation = lead_wise_explanation(model, x, args.class_id, record.id)
    classes = extras.get("classes")
    class_name = classes[explanation.class_id] if classes else None
    out = render_explanation(x, explanation, args.out, leads, class_name=class_name)
    print(f"class = {explanation.class_id}" + (f" ({class_name})" if class_name else ""))
    print("alpha = " + " ".join(f"{a:.4f}" for a in explanation.alpha))
    mask = load_evidence_mask(args.record, leads, model.spec.input_length)
    if mask is not None:
        print(f"evidence_mass_fraction = {evidence_mass_fraction(explanation.maps, mask):.4f}")
    return [out]


def cmd_prune(args) -> List[Path]:
    cfg = config_from_args(args)
    model, extras = load_checkpoint(args.checkpoint)
    original = model.clone()
    pruned, masks = prune_global_l1(model, cfg.sparsity, cfg.prune_mode)
    if args.finetune:
        dataset = _load_checkpoint_dataset(cfg, model, extras)
        fine_tune(pruned, dataset, masks, cfg.train_config(), cfg.finetune_epochs, cfg.finetune_lr,
                  progress=not args.quiet)
    extras = dict(extras, prune={"sparsity": cfg.sparsity, "seed": cfg.seed, "norm": "l1", "mode": cfg.prune_mode})
    out = Path(args.out)
    save_checkpoint(pruned, out, fmt="sparse", masks=masks, extras=extras, index_encoding=cfg.index_encoding)
    print(compression_report(original, pruned, masks, cfg.index_encoding).to_string())
    return [out]


def cmd_stats(args) -> List[Path]:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        stats = count_stats(model.spec, model)
    else:
        cfg = config_from_args(args)
        stats = count_stats(cfg.model_spec(args.n_classes))
    text = stats.to_text()
    print(text, end="")
    outputs = []
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        outputs.append(Path(args.out))
    return outputs


def cmd_sanity(args) -> List[Path]:
    cfg = config_from_args(args)
    model, extras = load_checkpoint(args.checkpoint)
    leads = tuple(extras.get("leads") or cfg.leads)
    dataset = _load_checkpoint_dataset(cfg, model, extras)
    n = min(args.n, len(dataset))
    report, pairs = sanity_check(model, dataset.x[:n], dataset.ids[:n], seed=cfg.seed, lead_names=leads,
                                 progress=not args.quiet)
    out = report.write(args.out)
    outputs = [out]
    if args.figure:
        original, randomized = pairs[0]
        rhos = report.table["rho"].to_numpy()[:len(leads)]
        outputs.append(render_sanity_comparison(dataset.x[0], original, randomized, args.figure, rhos, leads))
    print(f"mean_rho = {report.mean_rho:.4f}")
    print(report.per_lead().to_string())
    return outputs


def cmd_ablate(args) -> List[Path]:
    cfg = config_from_args(args)
    run = RunDirectory(cfg.runs_dir, cfg.name)
    with run.lock():
        run.write_config(cfg)
        classes = ECGDataLoader(_require_manifest(cfg)).manifest.classes
        table = chest_lead_ablation(cfg.manifest, _model_factory(cfg, len(classes)), cfg.train_config(),
                                    k=cfg.kfold, folds=cfg.folds, standardize=cfg.standardize,
                                    length=cfg.input_length, progress=not args.quiet)
        out = run.root / "ablation.csv"
        table.to_csv(out, index=False, float_format="%.6f", lineterminator="\n")
    print(table.to_string(index=False))
    return [run.config, out]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lx3ecg", description="Three-lead ECG classifier engine")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", default="multi_class", choices=["multi_class", "multi_label"])
    p.add_argument("--duration-s", type=float, default=10.0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training")
    add_config_arguments(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="metrics file")
    add_config_arguments(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("explain", help="lead-wise Grad-CAM for one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--class", dest="class_id", type=int, default=None)
    p.add_argument("--out", required=True, help="SVG path")
    p.add_argument("--raw", action="store_true", help="skip amplitude standardization")
    p.set_defaults(handler=cmd_explain)

    p = sub.add_parser("prune", help="global L1 pruning to a sparse checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--finetune", action="store_true", help="fine-tune on the config manifest after pruning")
    add_config_arguments(p)
    p.set_defaults(handler=cmd_prune)

    p = sub.add_parser("stats", help="params, FLOPs and checkpoint sizes")
    p.add_argument("--checkpoint")
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--out")
    add_config_arguments(p)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("sanity", help="classifier-randomization sanity check")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--out", required=True, help="lead,recording_id,rho,undefined file")
    p.add_argument("--figure", help="optional side-by-side SVG of the first recording")
    add_config_arguments(p)
    p.set_defaults(handler=cmd_sanity)

    p = sub.add_parser("ablate", help="chest-lead ablation (I, II, Vk)")
    add_config_arguments(p)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_environment()
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else os.getenv(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(level=level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                        stream=sys.stderr)
    try:
        outputs = args.handler(args)
    except ConfigError as e:
        logging.error(f"Configuration error: {e}")
        return 2
    except (LightX3ECGError, OSError) as e:
        logging.error(f"{args.command} failed: {e}")
        return 1
    missing = [str(p) for p in outputs if not Path(p).exists() or Path(p).stat().st_size == 0]
    if missing:
        logging.error(f"{args.command} finished but artifacts are missing: {missing}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

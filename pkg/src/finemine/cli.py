"""Command-line interface.

Exit codes: 0 on success, 1 on validation errors, 2 on I/O or artifact
integrity failures.  Setting the FINEMINE_SEED environment variable
overrides the master seed of any loaded configuration.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import mining
from .config import RunConfig, load_config
from .errors import IntegrityError, ValidationError
from .metrics import parse_csv, render_table
from .model import init, load_model, save_model, smooth_targets, train
from .pipeline import cluster_k_for, run_pipeline
from .plots import mining_curve_figure, model_errors_figure
from .synth import generate, load_bundle, save_bundle
from .tensorio import TensorFormatError, read_tensor, write_tensor

# kept alive for the process so BLAS pools stay clamped once requested
_THREAD_LIMITER = None


def _force_single_thread() -> None:
    global _THREAD_LIMITER
    if _THREAD_LIMITER is not None:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        return
    _THREAD_LIMITER = threadpool_limits(limits=1)


def _seed_override() -> int | None:
    raw = os.environ.get("FINEMINE_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ValidationError(
            f"FINEMINE_SEED must be an integer, got {raw!r}"
        ) from exc


def _load_cfg(path: str) -> RunConfig:
    cfg = load_config(path)
    override = _seed_override()
    if override is not None:
        cfg.seed = override
        cfg.gen = replace(cfg.gen, seed=override)
    return cfg


def _cmd_gen(args) -> int:
    cfg = _load_cfg(args.config)
    bundle = generate(cfg.gen)
    save_bundle(bundle, args.out)
    total = sum(
        len(v) for v in bundle.splits().values()
    )
    print(f"wrote {total} examples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    bundle = load_bundle(args.data)
    tcfg = replace(cfg.train, seed=cfg.seed)
    n = bundle.num_inclass_classes
    data = [
        (ex, smooth_targets(ex.label, n, tcfg.label_smooth_eps))
        for ex in bundle.labeled_train
    ]
    model, _ = train(init(n, cfg.seed, tcfg.crop_size), data, tcfg)
    save_model(model, args.out)
    acc = mining.model_accuracy(model, bundle.validation)
    print(f"validation accuracy: {100.0 * acc:.2f}%")
    return 0


def _cmd_mine(args) -> int:
    cfg = _load_cfg(args.config)
    bundle = load_bundle(args.data)
    models = [load_model(d) for d in args.models]
    pool = list(bundle.inclass_unlabeled) + list(bundle.outclass_unlabeled)
    pseudo = mining.mine_round(
        models, pool, round_index=1,
        min_agreement=cfg.mining.min_agreement,
        min_confidence=cfg.mining.min_confidence,
    )
    mining.save_pseudo_labels(pseudo, args.out)
    print(f"mined {len(pseudo)} pseudo labels to {args.out}")
    return 0


def _cmd_cluster_pretrain(args) -> int:
    cfg = _load_cfg(args.config)
    bundle = load_bundle(args.data)
    pretext_cfg = replace(
        cfg.train, epochs=cfg.cluster.epochs,
        warmup_epochs=cfg.cluster.warmup_epochs,
    )
    result = mining.cluster_pretrain(
        bundle.outclass_unlabeled, pretext_cfg, cluster_k_for(cfg, bundle),
        cfg.seed, holdout_frac=cfg.cluster.holdout_frac,
    )
    save_model(result.classifier, args.out)
    print(f"holdout accuracy: {100.0 * result.holdout_accuracy:.2f}% (k={result.k})")
    return 0


def _cmd_fuse(args) -> int:
    from . import fusion

    weights = [float(w) for w in args.weights.split(",") if w != ""]
    arrays = [read_tensor(p).astype(np.float64) for p in args.logits]
    if len(weights) != len(arrays):
        raise ValidationError(
            f"got {len(arrays)} logits files but {len(weights)} weights"
        )
    total = sum(weights)
    if total <= 0:
        raise ValidationError("weights must sum to a positive value")
    norm = [w / total for w in weights]
    fused = fusion.fuse(arrays, norm)
    write_tensor(args.out, fused.astype(np.float32))
    print(f"fused {len(arrays)} logit sets into {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import top1_error

    pred = read_tensor(args.pred)
    truth = read_tensor(args.truth)
    if truth.ndim != 1:
        raise ValidationError("truth tensor must be rank 1")
    if pred.ndim == 2:
        pred_ids = np.argmax(pred, axis=1)
    elif pred.ndim == 1:
        pred_ids = np.rint(pred).astype(np.int64)
    else:
        raise ValidationError("pred tensor must be rank 1 (ids) or rank 2 (logits)")
    truth_ids = np.rint(truth).astype(np.int64)
    err = top1_error(pred_ids, truth_ids)
    print(f"top1_error: {err:.4f}")
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _load_cfg(args.config)
    run_dir = run_pipeline(cfg, resume=not args.fresh, log=print)
    report_txt = run_dir / "11-report" / "report.txt"
    print(report_txt.read_text(encoding="utf-8"), end="")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    csv_path = run_dir / "11-report" / "report.csv"
    if not csv_path.is_file():
        raise IntegrityError(f"missing report artifact {csv_path}")
    text = csv_path.read_text(encoding="utf-8")
    report = parse_csv(text)
    figures = run_dir / "11-report" / "figures"
    if report.mining:
        mining_curve_figure(report.mining, figures / "mining_curve.png")
    model_errors_figure(report, figures / "model_errors.png")
    if args.format == "csv":
        print(text, end="")
    else:
        print(render_table(report), end="")
    return 0


_ST_HELP = "clamp numeric thread pools to one thread for bit-exact reruns"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="finemine",
        description="Semi-supervised recognition on synthetic striped-texture data",
    )
    parser.add_argument("--single-thread", action="store_true", help=_ST_HELP)
    # the flag is accepted after the subcommand too; SUPPRESS keeps the
    # subparser from overwriting a value the top-level parse already set
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument(
        "--single-thread", action="store_true",
        default=argparse.SUPPRESS, help=_ST_HELP,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[shared], help="generate a dataset bundle")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", parents=[shared],
                       help="train a supervised model on labeled data")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("mine", parents=[shared],
                       help="vote pseudo labels with an ensemble")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, nargs="+")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mine)

    p = sub.add_parser("cluster-pretrain", parents=[shared],
                       help="pretrain a backbone on cluster-id prediction")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cluster_pretrain)

    p = sub.add_parser("fuse", parents=[shared],
                       help="weighted-sum fusion of stored logits")
    p.add_argument("--logits", required=True, nargs="+")
    p.add_argument("--weights", required=True,
                   help="comma-separated weights, normalized before fusing")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("eval", parents=[shared], help="top-1 error of stored predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pipeline", parents=[shared],
                       help="run every stage end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--fresh", action="store_true",
                   help="ignore completed stage markers and redo everything")
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("report", parents=[shared],
                       help="render a finished run's report")
    p.add_argument("--run", required=True)
    p.add_argument("--format", choices=("csv", "table"), default="table")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "single_thread", False):
        _force_single_thread()
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IntegrityError, TensorFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

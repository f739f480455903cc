"""End-to-end run orchestration in eleven ordered, resumable stages.

Each stage owns one numbered subdirectory of the run directory and marks
completion with a `.done` file.  Stages always re-read their inputs from the
previous stage's artifacts, so resuming a run produces byte-identical
output to a fresh one.

Stage map:
  01-config      echo of the validated run configuration
  02-data        synthetic dataset bundle
  03-baseline    per-role models on labeled data only, the supervised reference
  04-mining-a    iterative ensemble mining (curve, pseudo labels, models)
  05-cluster     clustering pretext pretraining on out-of-class images
  06-finetune-b  re-headed finetune of the pretrained backbone, single-model mining
  07-intersect   agreement of both mining branches
  08-models      final generic and fine-grained models on labeled + mined data
  09-fix         optional higher-resolution head retraining
  10-eval        test logits, fusion, shot routing, accuracy summary
  11-report      delimited report, text table, JSON summary, figures

Only the reporting stages read hidden labels of unlabeled examples; every
training or selection decision upstream sees visible labels and votes only.
"""
from __future__ import annotations

import json
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import fusion, mining, plots
from .augment import crops_144, tta_three
from .config import RunConfig, save_config
from .errors import IntegrityError, ValidationError
from .imageops import resize_shorter_side
from .metrics import MetricsReport, MiningReportRow, ReportRow, emit_report, top1_error
from .mining import MiningRound, PseudoLabelSet
from .model import (
    Classifier,
    TrainConfig,
    _forward_batch,
    fix_finetune,
    init,
    load_model,
    save_model,
    smooth_targets,
    train,
    with_new_head,
)
from .synth import DatasetBundle, generate, load_bundle, save_bundle
from .tensorio import write_tensor

STAGES = (
    "01-config",
    "02-data",
    "03-baseline",
    "04-mining-a",
    "05-cluster",
    "06-finetune-b",
    "07-intersect",
    "08-models",
    "09-fix",
    "10-eval",
    "11-report",
)

_DONE = ".done"

# stable derived seeds: roles, loop members, and the second mining branch
# draw from separated streams so no two trained models share an rng
_ROLE_SEEDS = (("generic", 0), ("finegrained", 1))
_BRANCH_B_OFFSET = 100


def _stage_dir(run_dir: Path, name: str) -> Path:
    d = run_dir / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _is_done(run_dir: Path, name: str) -> bool:
    return (run_dir / name / _DONE).is_file()


def _mark_done(run_dir: Path, name: str) -> None:
    (run_dir / name / _DONE).write_text("done\n", encoding="utf-8")


def _role_seeds(cfg: RunConfig):
    return [(profile, cfg.seed + off) for profile, off in _ROLE_SEEDS]


def _loop_seeds(cfg: RunConfig) -> list[int]:
    return [cfg.seed + s for s in cfg.ensemble_seeds]


def _labeled_data(bundle: DatasetBundle, cfg: TrainConfig):
    n = bundle.num_inclass_classes
    return [
        (ex, smooth_targets(ex.label, n, cfg.label_smooth_eps))
        for ex in bundle.labeled_train
    ]


def _pseudo_data(bundle: DatasetBundle, pseudo: PseudoLabelSet, cfg: TrainConfig):
    pool = {ex.id: ex for ex in bundle.inclass_unlabeled}
    pool.update({ex.id: ex for ex in bundle.outclass_unlabeled})
    n = bundle.num_inclass_classes
    out = []
    for p in pseudo.entries:
        ex = pool.get(p.example_id)
        if ex is None:
            raise IntegrityError(
                f"pseudo label references unknown example id {p.example_id}"
            )
        out.append((ex, smooth_targets(p.label, n, cfg.label_smooth_eps)))
    return out


def _mining_pool(bundle: DatasetBundle):
    # pseudo-labels are only meaningful on the split whose hidden classes
    # coincide with the labeled ones; the other split is cluster material
    return list(bundle.inclass_unlabeled)


def _unlabeled_pool(bundle: DatasetBundle):
    return list(bundle.inclass_unlabeled) + list(bundle.outclass_unlabeled)


def _dump_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path):
    if not path.is_file():
        raise IntegrityError(f"missing artifact {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt JSON artifact {path}: {exc}") from exc


def run_pipeline(cfg: RunConfig, resume: bool = True,
                 log=lambda msg: None) -> Path:
    """Execute every stage; returns the run directory."""
    cfg.validate()
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    for name in STAGES:
        if resume and _is_done(run_dir, name):
            log(f"{name}: already complete, skipping")
            continue
        log(f"{name}: running")
        _STAGE_FNS[name](cfg, run_dir)
        _mark_done(run_dir, name)
    return run_dir


def _stage_config(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "01-config")
    save_config(cfg, d / "config.json")


def _stage_data(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "02-data")
    bundle = generate(cfg.gen)
    save_bundle(bundle, d / "bundle")


def _load_run_bundle(run_dir: Path) -> DatasetBundle:
    return load_bundle(run_dir / "02-data" / "bundle")


def _stage_baseline(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "03-baseline")
    bundle = _load_run_bundle(run_dir)
    for profile, seed in _role_seeds(cfg):
        pcfg = replace(cfg.profile_train_cfg(profile), seed=seed)
        model, curve = train(
            init(bundle.num_inclass_classes, seed, pcfg.crop_size),
            _labeled_data(bundle, pcfg), pcfg,
        )
        save_model(model, d / profile)
        _dump_json({"loss_curve": curve}, d / f"{profile}-train.json")


def _stage_mining_a(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "04-mining-a")
    bundle = _load_run_bundle(run_dir)
    seeds = _loop_seeds(cfg)
    pseudo, curve, models = mining.iterative_mining(
        bundle.labeled_train, _mining_pool(bundle), bundle.validation,
        seeds, cfg.train, cfg.mining,
    )
    mining.save_pseudo_labels(pseudo, d / "pseudo_a.txt")
    _dump_json([asdict(r) for r in curve], d / "curve.json")
    for seed, model in zip(seeds, models):
        save_model(model, d / "models" / f"seed-{seed}")


def cluster_k_for(cfg: RunConfig, bundle: DatasetBundle) -> int:
    """Resolve the cluster count; half the out-of-class classes by default."""
    if cfg.cluster.k is not None:
        return cfg.cluster.k
    return max(2, bundle.num_outclass_classes // 2)


def _stage_cluster(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "05-cluster")
    bundle = _load_run_bundle(run_dir)
    pretext_cfg = replace(
        cfg.train,
        epochs=cfg.cluster.epochs,
        warmup_epochs=cfg.cluster.warmup_epochs,
    )
    result = mining.cluster_pretrain(
        bundle.outclass_unlabeled, pretext_cfg, cluster_k_for(cfg, bundle),
        cfg.seed, holdout_frac=cfg.cluster.holdout_frac,
    )
    save_model(result.classifier, d / "model")
    _dump_json(
        {"k": result.k, "holdout_accuracy": result.holdout_accuracy},
        d / "cluster.json",
    )
    lines = ["example_id,cluster"]
    lines.extend(f"{eid},{c}" for eid, c in sorted(result.cluster_labels.items()))
    (d / "clusters.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _stage_finetune_b(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "06-finetune-b")
    bundle = _load_run_bundle(run_dir)
    pretrained = load_model(run_dir / "05-cluster" / "model")
    seed_b = cfg.seed + _BRANCH_B_OFFSET
    seeded = with_new_head(pretrained, bundle.num_inclass_classes, seed_b)
    cfg_b = replace(cfg.train, seed=seed_b)
    data = _labeled_data(bundle, cfg_b)
    model, _ = train(seeded, data, cfg_b)
    save_model(model, d / "model")
    # train the same recipe from scratch so the report can show what the
    # transferred conv stages buy over a cold start
    cold, _ = train(
        init(bundle.num_inclass_classes, seed_b, cfg_b.crop_size), data, cfg_b
    )
    _dump_json(
        {
            "val_accuracy_pretrained": mining.model_accuracy(
                model, bundle.validation
            ),
            "val_accuracy_random_init": mining.model_accuracy(
                cold, bundle.validation
            ),
        },
        d / "finetune.json",
    )
    pseudo = mining.mine_round(
        [model], _mining_pool(bundle), round_index=1,
        min_agreement=1, min_confidence=cfg.mining.min_confidence,
    )
    mining.save_pseudo_labels(pseudo, d / "pseudo_b.txt")


def _stage_intersect(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "07-intersect")
    set_a = mining.load_pseudo_labels(run_dir / "04-mining-a" / "pseudo_a.txt")
    set_b = mining.load_pseudo_labels(run_dir / "06-finetune-b" / "pseudo_b.txt")
    final = mining.intersect(set_a, set_b)
    mining.save_pseudo_labels(final, d / "pseudo_final.txt")


def _stage_models(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "08-models")
    bundle = _load_run_bundle(run_dir)
    pseudo = mining.load_pseudo_labels(run_dir / "07-intersect" / "pseudo_final.txt")
    for profile, seed in _role_seeds(cfg):
        pcfg = replace(cfg.profile_train_cfg(profile), seed=seed)
        if cfg.mining.retrain_epochs is not None:
            pcfg = replace(pcfg, epochs=cfg.mining.retrain_epochs)
        data = _labeled_data(bundle, pcfg) + _pseudo_data(bundle, pseudo, pcfg)
        model, curve = train(
            init(bundle.num_inclass_classes, seed, pcfg.crop_size), data, pcfg
        )
        save_model(model, d / profile)
        _dump_json({"loss_curve": curve}, d / f"{profile}-train.json")


def _stage_fix(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "09-fix")
    if not cfg.fix.enabled:
        _dump_json({"enabled": False}, d / "fix.json")
        return
    bundle = _load_run_bundle(run_dir)
    # the head must converge fully at the new resolution, so no warmup
    head_cfg = replace(cfg.train, epochs=cfg.fix.epochs, warmup_epochs=0)
    fix_pool = list(bundle.labeled_train) + list(bundle.validation)
    n = bundle.num_inclass_classes
    data = [
        (ex, smooth_targets(ex.label, n, head_cfg.label_smooth_eps))
        for ex in fix_pool
    ]
    for profile in ("generic", "finegrained"):
        model = load_model(run_dir / "08-models" / profile)
        fixed = fix_finetune(model, data, cfg.fix.resolution, head_cfg)
        save_model(fixed, d / f"{profile}-fix")
    _dump_json({"enabled": True, "resolution": cfg.fix.resolution}, d / "fix.json")


def _tta_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence((master, 0x77A, index)).generate_state(1)[0])


def _test_logits(model: Classifier, bundle: DatasetBundle, cfg: RunConfig,
                 allow_tta: bool) -> np.ndarray:
    images = np.stack([ex.image for ex in bundle.test])
    mode = cfg.tta.mode if allow_tta else "none"
    if mode == "none":
        return mining.batched_logits(model, images)
    res = model.input_resolution
    outs = np.empty((len(images), model.num_classes))
    for i, ex in enumerate(bundle.test):
        if mode == "three":
            # leave some slack around the crop so the random views differ
            base = resize_shorter_side(ex.image, res + max(1, res // 8))
            views = tta_three(base, res, _tta_seed(cfg.seed, i)).views
        else:
            views = crops_144(ex.image, cfg.tta.scales, res).views
        stack = np.stack(views).astype(np.float64)
        logits, _, _ = _forward_batch(model, stack)
        outs[i] = fusion.tta_aggregate(list(logits))
    return outs


def _val_images(bundle: DatasetBundle) -> np.ndarray:
    return np.stack([ex.image for ex in bundle.validation])


def _fused_val_metrics(generic: Classifier, finegrained: Classifier,
                       bundle: DatasetBundle) -> dict:
    """Per-model validation accuracy plus the accuracy-weighted fused error."""
    images = _val_images(bundle)
    truth = np.array([ex.label for ex in bundle.validation])
    zg = mining.batched_logits(generic, images)
    zf = mining.batched_logits(finegrained, images)
    accs = [
        float(np.mean(np.argmax(z, axis=1) == truth)) for z in (zg, zf)
    ]
    weights = fusion.weights_from_accuracy(accs)
    fused = fusion.fuse([zg, zf], weights)
    fused_error = top1_error(np.argmax(fused, axis=1), truth)
    return {
        "generic_accuracy": accs[0],
        "finegrained_accuracy": accs[1],
        "fused_error_percent": fused_error,
    }


def _stage_eval(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "10-eval")
    bundle = _load_run_bundle(run_dir)
    truth = np.array([ex.hidden_label for ex in bundle.test])
    crop = cfg.train.crop_size

    baseline_g = load_model(run_dir / "03-baseline" / "generic")
    baseline_f = load_model(run_dir / "03-baseline" / "finegrained")
    generic = load_model(run_dir / "08-models" / "generic")
    finegrained = load_model(run_dir / "08-models" / "finegrained")

    rows: list[dict] = []

    def add_row(name, model_logits, train_res, test_res):
        preds = np.argmax(model_logits, axis=1)
        rows.append({
            "model": name,
            "train_resolution": train_res,
            "test_resolution": test_res,
            "error_percent": top1_error(preds, truth),
        })
        write_tensor(d / f"{name}-test-logits.fmt1", model_logits.astype(np.float32))

    # supervised reference rows, plain single-crop inference
    add_row("baseline-generic",
            _test_logits(baseline_g, bundle, cfg, allow_tta=False), crop, crop)
    add_row("baseline-finegrained",
            _test_logits(baseline_f, bundle, cfg, allow_tta=False), crop, crop)

    zg = _test_logits(generic, bundle, cfg, allow_tta=True)
    zf = _test_logits(finegrained, bundle, cfg, allow_tta=True)
    add_row("generic", zg, crop, crop)
    add_row("finegrained", zf, crop, crop)

    fix_meta = _read_json(run_dir / "09-fix" / "fix.json")
    fix_summary: dict = {"enabled": bool(fix_meta.get("enabled"))}
    if fix_meta.get("enabled"):
        val_images = _val_images(bundle)
        val_truth = np.array([ex.label for ex in bundle.validation])
        deltas = {}
        for profile, unfixed in (("generic", generic), ("finegrained", finegrained)):
            fixed = load_model(run_dir / "09-fix" / f"{profile}-fix")
            zfix = _test_logits(fixed, bundle, cfg, allow_tta=False)
            add_row(f"{profile}-fix", zfix, crop, cfg.fix.resolution)
            # the fix effect is measured where it acts: both models read the
            # validation split at the higher resolution
            res = cfg.fix.resolution
            before = np.argmax(
                mining.batched_logits(unfixed.at_resolution(res), val_images), axis=1
            )
            after = np.argmax(
                mining.batched_logits(fixed, val_images), axis=1
            )
            deltas[profile] = {
                "val_accuracy_before": float(np.mean(before == val_truth)),
                "val_accuracy_after": float(np.mean(after == val_truth)),
            }
        fix_summary["resolution"] = cfg.fix.resolution
        fix_summary["val_at_fix_resolution"] = deltas

    val_acc_g = mining.model_accuracy(generic, bundle.validation)
    val_acc_f = mining.model_accuracy(finegrained, bundle.validation)
    weights = fusion.weights_from_accuracy([val_acc_g, val_acc_f])
    fused = fusion.fuse([zg, zf], weights)
    add_row("fused-ensemble", fused, crop, crop)

    # the fine-grained model's attention drives the shot routing
    test_images = np.stack([ex.image for ex in bundle.test])
    _, maps = mining.batched_logits_and_attention(finegrained, test_images)
    routed = np.empty_like(zg)
    shots = []
    for i in range(len(test_images)):
        routed[i], shot = fusion.route_by_attention(
            zg[i], zf[i], maps[i], cfg.fusion_plan
        )
        shots.append(shot)
    add_row("fused-routed", routed, crop, crop)

    true_shots = [ex.shot for ex in bundle.test]
    assigned = [i for i, s in enumerate(shots) if s in ("long", "close")]
    tagged = [i for i, s in enumerate(true_shots) if s in ("long", "close")]
    shot_agreement = {
        "assigned_long_close": (
            float(np.mean([shots[i] == true_shots[i] for i in assigned]))
            if assigned else None
        ),
        "assigned_count": len(assigned),
        "tagged_long_close": (
            float(np.mean([shots[i] == true_shots[i] for i in tagged]))
            if tagged else None
        ),
        "tagged_count": len(tagged),
        "three_way": float(np.mean([p == t for p, t in zip(shots, true_shots)])),
    }
    shot_lines = ["example_id,true_shot,routed_shot"]
    shot_lines.extend(
        f"{ex.id},{ex.shot},{shots[i]}" for i, ex in enumerate(bundle.test)
    )
    (d / "shots.csv").write_text("\n".join(shot_lines) + "\n", encoding="utf-8")

    _dump_json({
        "rows": rows,
        "validation": {
            "baseline": _fused_val_metrics(baseline_g, baseline_f, bundle),
            "final": _fused_val_metrics(generic, finegrained, bundle),
        },
        "fix": fix_summary,
        "fusion_weights": [float(w) for w in weights],
        "shot_agreement": shot_agreement,
        "shot_counts": {s: int(np.sum([p == s for p in shots]))
                        for s in fusion.SHOT_NAMES},
        "tta_mode": cfg.tta.mode,
    }, d / "summary.json")


def _mined_precision(pseudo: PseudoLabelSet, bundle: DatasetBundle):
    """Fraction of pseudo labels matching the hidden truth, overall and per round."""
    hidden = {ex.id: ex.hidden_label for ex in _unlabeled_pool(bundle)}
    per_round: dict[int, list[bool]] = {}
    overall: list[bool] = []
    for p in pseudo.entries:
        ok = hidden.get(p.example_id) == p.label
        overall.append(ok)
        per_round.setdefault(p.round_index, []).append(ok)
    summary = {
        "count": len(overall),
        "precision": float(np.mean(overall)) if overall else None,
        "per_round": {
            str(r): {"count": len(v), "precision": float(np.mean(v))}
            for r, v in sorted(per_round.items())
        },
    }
    return summary


def _mining_report_rows(curve: list[MiningRound], pseudo: PseudoLabelSet,
                        bundle: DatasetBundle) -> list[MiningReportRow]:
    """Join the loop curve with hidden-label precision, cumulative by round."""
    hidden = {ex.id: ex.hidden_label for ex in _unlabeled_pool(bundle)}
    rows = []
    for r in curve:
        upto = [p for p in pseudo.entries if p.round_index <= r.round_index]
        if len(upto) != r.mined_total:
            raise IntegrityError(
                f"mining round {r.round_index}: curve reports {r.mined_total} "
                f"labels but {len(upto)} were stored"
            )
        matches = [hidden.get(p.example_id) == p.label for p in upto]
        rows.append(MiningReportRow(
            round=r.round_index,
            pseudo_count=r.mined_total,
            precision=float(np.mean(matches)) if matches else 0.0,
            val_accuracy=r.val_accuracy,
        ))
    return rows


def _stage_report(cfg: RunConfig, run_dir: Path) -> None:
    d = _stage_dir(run_dir, "11-report")
    bundle = _load_run_bundle(run_dir)
    summary = _read_json(run_dir / "10-eval" / "summary.json")
    curve_raw = _read_json(run_dir / "04-mining-a" / "curve.json")
    curve = [MiningRound(**r) for r in curve_raw]

    pseudo_a = mining.load_pseudo_labels(run_dir / "04-mining-a" / "pseudo_a.txt")
    pseudo_b = mining.load_pseudo_labels(run_dir / "06-finetune-b" / "pseudo_b.txt")
    final = mining.load_pseudo_labels(run_dir / "07-intersect" / "pseudo_final.txt")

    report = MetricsReport(
        rows=[ReportRow(**row) for row in summary["rows"]],
        mining=_mining_report_rows(curve, pseudo_a, bundle),
    )
    (d / "report.csv").write_text(emit_report(report, "csv"), encoding="utf-8")
    (d / "report.txt").write_text(emit_report(report, "table"), encoding="utf-8")

    cluster_meta = _read_json(run_dir / "05-cluster" / "cluster.json")
    finetune_meta = _read_json(run_dir / "06-finetune-b" / "finetune.json")
    _dump_json({
        "rows": summary["rows"],
        "mining_rows": [asdict(r) for r in report.mining],
        "mining_precision": {
            "branch_a": _mined_precision(pseudo_a, bundle),
            "branch_b": _mined_precision(pseudo_b, bundle),
            "final": _mined_precision(final, bundle),
        },
        "cluster_holdout_accuracy": cluster_meta["holdout_accuracy"],
        "cluster_finetune": finetune_meta,
        "validation": summary["validation"],
        "fix": summary["fix"],
        "shot_agreement": summary["shot_agreement"],
        "shot_counts": summary["shot_counts"],
        "fusion_weights": summary["fusion_weights"],
        "tta_mode": summary["tta_mode"],
    }, d / "report.json")

    plots.mining_curve_figure(report.mining, d / "figures" / "mining_curve.png")
    plots.model_errors_figure(report, d / "figures" / "model_errors.png")


_STAGE_FNS = {
    "01-config": _stage_config,
    "02-data": _stage_data,
    "03-baseline": _stage_baseline,
    "04-mining-a": _stage_mining_a,
    "05-cluster": _stage_cluster,
    "06-finetune-b": _stage_finetune_b,
    "07-intersect": _stage_intersect,
    "08-models": _stage_models,
    "09-fix": _stage_fix,
    "10-eval": _stage_eval,
    "11-report": _stage_report,
}


def grid_search(labeled, validation, base_cfg: TrainConfig,
                lrs=(0.01, 0.025, 0.05), batch_sizes=(32, 64), seed: int = 0):
    """Exhaustive (lr, batch) sweep picking the best validation accuracy.

    Ties prefer the lower learning rate, then the smaller batch, which the
    ascending sweep order plus strict improvement gives for free.
    """
    if not labeled or not validation:
        raise ValidationError("grid search requires labeled and validation data")
    if not lrs or not batch_sizes:
        raise ValidationError("grid search requires non-empty grids")
    num_classes = max(ex.label for ex in labeled) + 1
    results = []
    best = None
    for lr in sorted(lrs):
        for bs in sorted(batch_sizes):
            cfg = replace(base_cfg, base_lr=lr, batch_size=bs, seed=seed)
            data = [
                (ex, smooth_targets(ex.label, num_classes, cfg.label_smooth_eps))
                for ex in labeled
            ]
            model, _ = train(init(num_classes, seed, cfg.crop_size), data, cfg)
            acc = mining.model_accuracy(model, validation)
            results.append({"base_lr": lr, "batch_size": bs, "val_accuracy": acc})
            if best is None or acc > best[0]:
                best = (acc, cfg)
    return best[1], results

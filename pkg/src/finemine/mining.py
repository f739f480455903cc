"""Pseudo-label mining from an ensemble, plus clustering pretext training.

An ensemble votes on unlabeled examples; unanimous-enough, confident-enough
votes become pseudo labels.  Rounds alternate retraining and mining until
the validation gain flattens.  A second branch pretrains a backbone by
predicting k-means cluster ids over pooled features; intersecting both
branches' labels keeps only corroborated ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fusion
from .errors import IntegrityError, ValidationError
from .imageops import avgpool_to, center_crop, resize_shorter_side
from .model import (
    Classifier,
    TrainConfig,
    _forward_batch,
    init,
    smooth_targets,
    train,
)


@dataclass
class PseudoLabel:
    example_id: str
    label: int
    confidence: float
    agreement: int
    round_index: int


@dataclass
class PseudoLabelSet:
    entries: list[PseudoLabel] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def by_id(self) -> dict[str, PseudoLabel]:
        return {p.example_id: p for p in self.entries}

    def sorted(self) -> "PseudoLabelSet":
        return PseudoLabelSet(sorted(self.entries, key=lambda p: p.example_id))


@dataclass
class MiningConfig:
    # each extra round retrains the whole ensemble, so the cap dominates
    # wall-clock cost; two rounds already capture most of the gain
    max_rounds: int = 2
    min_confidence: float = 0.6
    min_agreement: int | None = None  # None means every voter must agree
    converge_tol: float = 0.0  # points of validation accuracy
    # rounds past the first train on several times more data per epoch, so
    # they hit the same step budget with fewer passes; None reuses the base
    # epoch count
    retrain_epochs: int | None = 300

    def validate(self) -> None:
        if self.max_rounds < 1:
            raise ValidationError("mining config field 'max_rounds' must be >= 1")
        if self.retrain_epochs is not None and self.retrain_epochs < 1:
            raise ValidationError(
                "mining config field 'retrain_epochs' must be >= 1"
            )
        if not (0 <= self.min_confidence <= 1):
            raise ValidationError(
                "mining config field 'min_confidence' must lie in [0, 1]"
            )
        if self.min_agreement is not None and self.min_agreement < 1:
            raise ValidationError(
                "mining config field 'min_agreement' must be >= 1"
            )
        if self.converge_tol < 0:
            raise ValidationError(
                "mining config field 'converge_tol' must be >= 0"
            )


def vote_top1(logits_rows) -> tuple[int, float, int]:
    """Plurality vote over per-model logits for one example.

    Returns (label, mean top-1 confidence over the winning voters, number of
    winning voters).  Ties break by summed confidence, then smaller class id.
    """
    rows = [np.asarray(r, dtype=np.float64) for r in logits_rows]
    if not rows:
        raise ValidationError("vote requires at least one logits row")
    width = rows[0].shape[-1]
    if any(r.ndim != 1 or r.shape[0] != width for r in rows):
        raise ValidationError("logits rows must share one class count")

    votes: dict[int, list[float]] = {}
    for row in rows:
        probs = _softmax_row(row)
        cls = int(np.argmax(probs))
        votes.setdefault(cls, []).append(float(probs[cls]))

    def rank(item):
        cls, confs = item
        return (-len(confs), -sum(confs), cls)

    winner, confs = min(votes.items(), key=rank)
    return winner, float(np.mean(confs)), len(confs)


def _softmax_row(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    e = np.exp(z)
    return e / e.sum()


def select_confident(candidates: list[PseudoLabel], min_agreement: int,
                     min_confidence: float) -> list[PseudoLabel]:
    """Keep votes meeting both the agreement and confidence floors."""
    return [
        p
        for p in candidates
        if p.agreement >= min_agreement and p.confidence >= min_confidence
    ]


def _preprocess(images: np.ndarray, resolution: int) -> np.ndarray:
    """Shorter side to `resolution`, then center crop: the inference path."""
    out = np.empty((len(images), resolution, resolution, images.shape[-1]),
                   dtype=np.float32)
    for i, img in enumerate(images):
        out[i] = center_crop(
            resize_shorter_side(img, resolution), resolution, resolution
        )
    return out


def predict_argmax(model: Classifier, images: np.ndarray,
                   chunk: int = 512) -> np.ndarray:
    logits = batched_logits(model, images, chunk=chunk)
    return np.argmax(logits, axis=1)


def batched_logits(model: Classifier, images: np.ndarray,
                   chunk: int = 512) -> np.ndarray:
    outs = []
    for start in range(0, len(images), chunk):
        x = _preprocess(images[start : start + chunk], model.input_resolution)
        logits, _, _ = _forward_batch(model, x.astype(np.float64))
        outs.append(logits)
    return np.concatenate(outs, axis=0)


def batched_logits_and_attention(model: Classifier, images: np.ndarray,
                                 chunk: int = 512):
    """Logits plus per-example max-normalized attention maps."""
    from .model import attention_from_features

    logit_parts, maps = [], []
    for start in range(0, len(images), chunk):
        x = _preprocess(images[start : start + chunk], model.input_resolution)
        logits, a2, _ = _forward_batch(model, x.astype(np.float64))
        logit_parts.append(logits)
        maps.extend(attention_from_features(a2[i]) for i in range(len(a2)))
    return np.concatenate(logit_parts, axis=0), maps


def model_accuracy(model: Classifier, examples) -> float:
    """Top-1 accuracy fraction on examples with visible labels."""
    if not examples:
        raise ValidationError("accuracy requires at least one example")
    images = np.stack([ex.image for ex in examples])
    preds = predict_argmax(model, images)
    truth = np.array([ex.label for ex in examples])
    return float(np.mean(preds == truth))


def ensemble_val_accuracy(models: list[Classifier], examples) -> float:
    """Accuracy of the accuracy-weighted fused ensemble, as a fraction."""
    if not models:
        raise ValidationError("ensemble requires at least one model")
    images = np.stack([ex.image for ex in examples])
    truth = np.array([ex.label for ex in examples])
    per_model = [batched_logits(m, images) for m in models]
    accs = [float(np.mean(np.argmax(z, axis=1) == truth)) for z in per_model]
    weights = fusion.weights_from_accuracy(accs)
    fused = fusion.fuse(per_model, weights)
    return float(np.mean(np.argmax(fused, axis=1) == truth))


def mine_round(models: list[Classifier], unlabeled, round_index: int,
               min_agreement: int | None = None,
               min_confidence: float = 0.6) -> PseudoLabelSet:
    """One voting pass of the ensemble over unlabeled examples."""
    if not models:
        raise ValidationError("mining requires at least one model")
    if min_agreement is None:
        min_agreement = len(models)
    if not (1 <= min_agreement <= len(models)):
        raise ValidationError(
            f"min_agreement {min_agreement} must lie in [1, {len(models)}]"
        )
    if not unlabeled:
        return PseudoLabelSet()
    images = np.stack([ex.image for ex in unlabeled])
    per_model = [batched_logits(m, images) for m in models]
    candidates = []
    for i, ex in enumerate(unlabeled):
        label, conf, agree = vote_top1([z[i] for z in per_model])
        candidates.append(PseudoLabel(
            example_id=ex.id, label=label, confidence=conf,
            agreement=agree, round_index=round_index,
        ))
    kept = select_confident(candidates, min_agreement, min_confidence)
    return PseudoLabelSet(kept).sorted()


@dataclass
class MiningRound:
    round_index: int
    val_accuracy: float  # fraction
    mined_total: int
    mined_new: int


def iterative_mining(labeled, unlabeled, validation, seeds: list[int],
                     train_cfg: TrainConfig, mining_cfg: MiningConfig
                     ) -> tuple[PseudoLabelSet, list[MiningRound], list[Classifier]]:
    """Alternate ensemble retraining and mining until validation flattens.

    Each round retrains one model per seed from scratch on the labeled pool
    plus all pseudo labels mined so far, logs the fused validation accuracy,
    then votes on the still-unlabeled remainder.  A mined label is final:
    later rounds never relabel or drop it.  Rounds stop early once the
    round-over-round gain falls below converge_tol points.
    """
    mining_cfg.validate()
    if not seeds:
        raise ValidationError("iterative mining requires at least one seed")
    if not labeled:
        raise ValidationError("iterative mining requires labeled examples")
    num_classes = max(ex.label for ex in labeled) + 1
    by_id = {ex.id: ex for ex in unlabeled}
    mined: dict[str, PseudoLabel] = {}
    curve: list[MiningRound] = []
    models: list[Classifier] = []
    prev_acc = None
    for round_index in range(1, mining_cfg.max_rounds + 1):
        data = [
            (ex, smooth_targets(ex.label, num_classes, train_cfg.label_smooth_eps))
            for ex in labeled
        ]
        for p in mined.values():
            data.append((
                by_id[p.example_id],
                smooth_targets(p.label, num_classes, train_cfg.label_smooth_eps),
            ))
        round_cfg = train_cfg
        if round_index > 1 and mining_cfg.retrain_epochs is not None:
            round_cfg = replace(train_cfg, epochs=mining_cfg.retrain_epochs)
        models = []
        for seed in seeds:
            cfg = replace(round_cfg, seed=seed)
            m, _ = train(init(num_classes, seed, cfg.crop_size), data, cfg)
            models.append(m)
        acc = ensemble_val_accuracy(models, validation)
        remaining = [ex for ex in unlabeled if ex.id not in mined]
        fresh = mine_round(
            models, remaining, round_index,
            min_agreement=mining_cfg.min_agreement,
            min_confidence=mining_cfg.min_confidence,
        )
        for p in fresh.entries:
            mined[p.example_id] = p
        curve.append(MiningRound(
            round_index=round_index, val_accuracy=acc,
            mined_total=len(mined), mined_new=len(fresh),
        ))
        if prev_acc is not None and (acc - prev_acc) * 100.0 < mining_cfg.converge_tol:
            break
        prev_acc = acc
    final = PseudoLabelSet(list(mined.values())).sorted()
    return final, curve, models


def features_for_clustering(images: np.ndarray) -> np.ndarray:
    """Per-channel 8x8 average pooling, flattened to one row per image."""
    if len(images) == 0:
        raise ValidationError("feature extraction requires at least one image")
    rows = np.empty((len(images), 8 * 8 * images.shape[-1]), dtype=np.float64)
    for i, img in enumerate(images):
        rows[i] = avgpool_to(img.astype(np.float64), 8, 8).reshape(-1)
    return rows


def kmeans(points: np.ndarray, k: int, seed: int, restarts: int = 5,
           max_iter: int = 100, trace_out: dict | None = None
           ) -> tuple[np.ndarray, np.ndarray, float]:
    """Plus-plus seeded Lloyd iterations, best inertia over restarts.

    Distance ties assign to the smaller centroid index; an empty cluster is
    reseeded to the point farthest from its own centroid.  Restart inertia
    ties keep the earliest restart.  When `trace_out` is given it receives
    the per-iteration inertia of every restart under key "per_restart" and
    the winning restart's index under "best_restart".
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValidationError("points must be a non-empty 2-D array")
    if not np.isfinite(points).all():
        raise ValidationError("points must be finite")
    n = points.shape[0]
    if not (1 <= k <= n):
        raise ValidationError(f"k {k} must lie in [1, {n}]")
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")

    best = None
    best_restart = 0
    traces: list[list[float]] = []
    for restart in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence((seed, restart)))
        centroids = _plus_plus_init(points, k, rng)
        labels = np.full(n, -1, dtype=np.int64)
        trace: list[float] = []
        for _ in range(max_iter):
            d2 = _sq_dists(points, centroids)
            new_labels = np.argmin(d2, axis=1)
            reseeded = False
            for empty in range(k):
                if not np.any(new_labels == empty):
                    assigned = d2[np.arange(n), new_labels]
                    far = int(np.argmax(assigned))
                    centroids[empty] = points[far]
                    new_labels[far] = empty
                    reseeded = True
            if not reseeded:
                trace.append(float(d2[np.arange(n), new_labels].sum()))
            if not reseeded and np.array_equal(new_labels, labels):
                labels = new_labels
                break
            labels = new_labels
            for c in range(k):
                centroids[c] = points[labels == c].mean(axis=0)
        d2 = _sq_dists(points, centroids)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), labels].sum())
        traces.append(trace)
        if best is None or inertia < best[2]:
            best = (centroids, labels, inertia)
            best_restart = restart
    if trace_out is not None:
        trace_out["per_restart"] = traces
        trace_out["best_restart"] = best_restart
    return best


def _plus_plus_init(points: np.ndarray, k: int, rng) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(0, n))]
    for c in range(1, k):
        d2 = _sq_dists(points, centroids[:c]).min(axis=1)
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(0, n))
        centroids[c] = points[idx]
    return centroids


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


@dataclass
class ClusterModel:
    classifier: Classifier
    holdout_accuracy: float  # fraction
    k: int
    cluster_labels: dict[str, int]


def cluster_pretrain(examples, train_cfg: TrainConfig, k: int, seed: int,
                     holdout_frac: float = 0.1) -> ClusterModel:
    """Pretext task: predict k-means cluster ids of pooled image features.

    Clusters all examples, holds out a seeded fraction, trains a k-way
    classifier on the rest, and reports holdout top-1.  Callers keep the
    conv stages and re-head the model for the real label space.
    """
    train_cfg.validate()
    if len(examples) < 2:
        raise ValidationError("cluster pretraining requires at least 2 examples")
    if not (0 < holdout_frac < 1):
        raise ValidationError("holdout_frac must lie in (0, 1)")
    images = np.stack([ex.image for ex in examples])
    feats = features_for_clustering(images)
    _, labels, _ = kmeans(feats, k, seed)
    cluster_labels = {ex.id: int(labels[i]) for i, ex in enumerate(examples)}

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA0)))
    order = rng.permutation(len(examples))
    n_hold = max(1, int(round(holdout_frac * len(examples))))
    hold_idx = order[:n_hold]
    fit_idx = order[n_hold:]
    if len(fit_idx) == 0:
        raise ValidationError("holdout fraction leaves no training examples")

    data = [
        (examples[i], smooth_targets(int(labels[i]), k, train_cfg.label_smooth_eps))
        for i in fit_idx
    ]
    cfg = replace(train_cfg, seed=seed)
    model, _ = train(init(k, seed, cfg.crop_size), data, cfg)
    hold_images = images[hold_idx]
    preds = predict_argmax(model, hold_images)
    acc = float(np.mean(preds == labels[hold_idx]))
    return ClusterModel(classifier=model, holdout_accuracy=acc, k=k,
                        cluster_labels=cluster_labels)


def intersect(set_a: PseudoLabelSet, set_b: PseudoLabelSet) -> PseudoLabelSet:
    """Keep ids labeled identically by both branches.

    Confidence is the more cautious (min) of the two, agreement adds up,
    and the round index is the later of the two.
    """
    b_by_id = set_b.by_id()
    out = []
    for p in set_a.entries:
        q = b_by_id.get(p.example_id)
        if q is None or q.label != p.label:
            continue
        out.append(PseudoLabel(
            example_id=p.example_id, label=p.label,
            confidence=min(p.confidence, q.confidence),
            agreement=p.agreement + q.agreement,
            round_index=max(p.round_index, q.round_index),
        ))
    return PseudoLabelSet(out).sorted()


_PSEUDO_HEADER = "example_id,label,confidence,agreement,round"


def save_pseudo_labels(labels: PseudoLabelSet, path: str | Path) -> None:
    """Text artifact, one row per example, sorted by example id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [_PSEUDO_HEADER]
    for p in labels.sorted().entries:
        lines.append(
            f"{p.example_id},{p.label},{p.confidence!r},{p.agreement},{p.round_index}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pseudo_labels(path: str | Path) -> PseudoLabelSet:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"missing pseudo-label file {path}")
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != _PSEUDO_HEADER:
        raise IntegrityError(
            f"pseudo-label file {path} must start with header '{_PSEUDO_HEADER}'"
        )
    out = []
    for ln_no, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise IntegrityError(
                f"pseudo-label file {path} line {ln_no}: expected 5 fields"
            )
        try:
            out.append(PseudoLabel(
                example_id=parts[0], label=int(parts[1]),
                confidence=float(parts[2]), agreement=int(parts[3]),
                round_index=int(parts[4]),
            ))
        except ValueError as exc:
            raise IntegrityError(
                f"pseudo-label file {path} line {ln_no}: {exc}"
            ) from exc
    return PseudoLabelSet(out)

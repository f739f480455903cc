"""Combining predictions: accuracy-weighted logit fusion, test-time-view
aggregation, and shot-aware routing between a generic and a fine-grained
model based on how much of the frame the attention map covers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

SHOT_NAMES = ("long", "medium", "close")


def _default_routing() -> dict[str, tuple[float, float]]:
    # (generic weight, fine-grained weight) per shot class
    return {"long": (0.7, 0.3), "medium": (0.3, 0.7), "close": (0.6, 0.4)}


@dataclass
class FusionPlan:
    routing: dict[str, tuple[float, float]] = field(default_factory=_default_routing)
    t_long: float = 0.1
    t_close: float = 0.6
    # peak-relative cut for the attended area; 0.35 keeps the three shot
    # scales apart on 7x7 maps where a 0.5 cut crowds everything small
    binarize: float = 0.35

    def validate(self) -> None:
        if set(self.routing) != set(SHOT_NAMES):
            raise ValidationError(
                f"routing must define exactly the shots {sorted(SHOT_NAMES)}"
            )
        for shot, pair in self.routing.items():
            if len(pair) != 2:
                raise ValidationError(f"routing for '{shot}' must be a pair")
            wg, wf = pair
            if wg < 0 or wf < 0:
                raise ValidationError(f"routing weights for '{shot}' must be >= 0")
            if abs((wg + wf) - 1.0) > 1e-6:
                raise ValidationError(f"routing weights for '{shot}' must sum to 1")
        if not (0 < self.t_long < self.t_close < 1):
            raise ValidationError("thresholds must satisfy 0 < t_long < t_close < 1")
        if not (0 < self.binarize <= 1):
            raise ValidationError("binarize must lie in (0, 1]")


def weights_from_accuracy(accuracies) -> np.ndarray:
    """Normalize per-model accuracies into fusion weights."""
    accs = np.asarray(accuracies, dtype=np.float64)
    if accs.ndim != 1 or accs.size == 0:
        raise ValidationError("accuracies must be a non-empty 1-D sequence")
    if np.any(accs < 0):
        raise ValidationError("accuracies must be >= 0")
    total = accs.sum()
    if total <= 0:
        raise ValidationError("at least one accuracy must be positive")
    return accs / total


def fuse(logits_list, weights) -> np.ndarray:
    """Weighted sum of pre-softmax logits across models."""
    weights = np.asarray(weights, dtype=np.float64)
    arrays = [np.asarray(z, dtype=np.float64) for z in logits_list]
    if len(arrays) == 0:
        raise ValidationError("fuse requires at least one logits array")
    if weights.shape != (len(arrays),):
        raise ValidationError(
            f"got {len(arrays)} logits arrays but {weights.size} weights"
        )
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValidationError("all logits arrays must share one shape")
    out = np.zeros(shape, dtype=np.float64)
    for w, a in zip(weights, arrays):
        out += w * a
    return out


def tta_aggregate(logits_list) -> np.ndarray:
    """Unweighted mean of per-view logits."""
    arrays = [np.asarray(z, dtype=np.float64) for z in logits_list]
    if len(arrays) == 0:
        raise ValidationError("aggregation requires at least one logits array")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValidationError("all logits arrays must share one shape")
    return np.mean(arrays, axis=0)


def attention_area_ratio(attention_map: np.ndarray, binarize: float = 0.5) -> float:
    """Fraction of cells at or above binarize * max; all-zero maps give 0."""
    if not (0 < binarize <= 1):
        raise ValidationError("binarize must lie in (0, 1]")
    amap = np.asarray(attention_map, dtype=np.float64)
    if amap.ndim != 2 or amap.size == 0:
        raise ValidationError("attention map must be a non-empty 2-D array")
    peak = amap.max()
    if peak <= 0:
        return 0.0
    return float(np.mean(amap >= binarize * peak))


def classify_shot(ratio: float, t_long: float = 0.1, t_close: float = 0.6) -> str:
    """Small subject area reads as a long shot, large as a close shot."""
    if not (0 < t_long < t_close < 1):
        raise ValidationError("thresholds must satisfy 0 < t_long < t_close < 1")
    if not (0 <= ratio <= 1):
        raise ValidationError("ratio must lie in [0, 1]")
    if ratio < t_long:
        return "long"
    if ratio >= t_close:
        return "close"
    return "medium"


def routed_fuse(generic_logits, finegrained_logits, shot: str,
                plan: FusionPlan) -> np.ndarray:
    """Blend the two models with the routing weights of one shot class."""
    plan.validate()
    if shot not in plan.routing:
        raise ValidationError(f"unknown shot {shot!r}; use {sorted(plan.routing)}")
    zg = np.asarray(generic_logits, dtype=np.float64)
    zf = np.asarray(finegrained_logits, dtype=np.float64)
    if zg.shape != zf.shape:
        raise ValidationError(
            f"logits shapes differ: {zg.shape} vs {zf.shape}"
        )
    wg, wf = plan.routing[shot]
    return wg * zg + wf * zf


def route_by_attention(generic_logits, finegrained_logits, attention_map,
                       plan: FusionPlan) -> tuple[np.ndarray, str]:
    """Classify the shot from the attention map, then blend accordingly.

    The shot class comes from the attention area ratio under plan.binarize;
    returns (fused logits, shot name).
    """
    ratio = attention_area_ratio(attention_map, plan.binarize)
    shot = classify_shot(ratio, plan.t_long, plan.t_close)
    return routed_fuse(generic_logits, finegrained_logits, shot, plan), shot

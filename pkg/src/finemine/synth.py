"""Seeded synthetic fine-grained dataset generation and on-disk bundles.

Each image is a cluttered background (soft ellipses + noise over a discrete
base palette) with one striped motif patch pasted in. Class identity is
carried by the stripe period, so images of different classes stay close in
pixel space relative to the background variance. The motif bounding-box
area encodes the shot type (long / medium / close).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ValidationError
from .imageops import validate_image
from .tensorio import TensorFormatError, read_tensor, write_tensor

SHOTS = ("long", "medium", "close")
SHOT_BANDS = {
    "long": (0.01, 0.06),
    "medium": (0.10, 0.40),
    "close": (0.55, 0.90),
}

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

# background palette: 5 base levels x 3 channel tints
_BASE_LEVELS = (0.15, 0.30, 0.45, 0.60, 0.75)
_TINTS = ((0.06, 0.0, -0.06), (-0.06, 0.06, 0.0), (0.0, -0.06, 0.06))
_ELLIPSE_AMPLITUDE = 0.05
_NOISE_SIGMA = 0.05
_STRIPE_AMPLITUDE = 0.35
_BASE_PERIOD = 2.5
_PERIOD_STEP = 0.5
# class identity also nudges the stripe base level; the per-class step is
# small next to the palette spread so backgrounds still dominate pixel
# distance between classes
_LEVEL_LO = 0.22
_LEVEL_HI = 0.78
_POSITION_JITTER = 0.15


@dataclass
class Example:
    """One image with its (possibly hidden) ground truth.

    `label` is what training code may read; `hidden_label` is the ground
    truth kept only for mining-quality measurement on unlabeled splits.
    """

    id: str
    image: np.ndarray
    label: int | None
    hidden_label: int
    shot: str
    target_area_ratio: float


@dataclass
class GenSpec:
    num_inclass_classes: int = 10
    num_outclass_classes: int = 20
    image_size: int = 32
    labeled_train: int = 300
    validation: int = 200
    inclass_unlabeled: int = 2000
    outclass_unlabeled: int = 4000
    test: int = 500
    imbalance_exponent: float = 1.5
    shot_mix: tuple[float, float, float] = (0.3, 0.4, 0.3)
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_inclass_classes", "num_outclass_classes", "image_size",
                     "labeled_train", "validation", "inclass_unlabeled",
                     "outclass_unlabeled", "test"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise ValidationError(f"gen spec field '{name}' must be a positive integer")
        if self.num_inclass_classes < 2:
            raise ValidationError("gen spec field 'num_inclass_classes' must be >= 2")
        if self.image_size < 8:
            raise ValidationError("gen spec field 'image_size' must be >= 8")
        if len(self.shot_mix) != len(SHOTS):
            raise ValidationError("gen spec field 'shot_mix' must have 3 entries")
        if any(p < 0 for p in self.shot_mix):
            raise ValidationError("gen spec field 'shot_mix' entries must be >= 0")
        if abs(sum(self.shot_mix) - 1.0) > 1e-9:
            raise ValidationError("gen spec field 'shot_mix' must sum to 1")
        if self.validation % self.num_inclass_classes != 0:
            raise ValidationError(
                "gen spec field 'validation' must be divisible by num_inclass_classes "
                "to allow an exactly balanced split"
            )
        if self.imbalance_exponent <= 0:
            raise ValidationError("gen spec field 'imbalance_exponent' must be > 0")


@dataclass
class DatasetBundle:
    labeled_train: list[Example]
    validation: list[Example]
    inclass_unlabeled: list[Example]
    outclass_unlabeled: list[Example]
    test: list[Example]
    num_inclass_classes: int
    num_outclass_classes: int
    gen_spec: GenSpec | None = field(default=None, repr=False)

    def splits(self) -> dict[str, list[Example]]:
        return {
            "labeled_train": self.labeled_train,
            "validation": self.validation,
            "inclass_unlabeled": self.inclass_unlabeled,
            "outclass_unlabeled": self.outclass_unlabeled,
            "test": self.test,
        }


def _period_rank(class_id: int, num_inclass: int) -> int:
    # walk the ranks with a multiplier coprime to the class count so ids
    # adjacent in brightness sit far apart in period; the cues stay
    # independent instead of reinforcing one orderings' confusions
    c = class_id % num_inclass
    for m in range(2, num_inclass):
        if math.gcd(m, num_inclass) == 1:
            return (c * m) % num_inclass
    return c


def period_for_class(class_id: int, num_inclass: int) -> float:
    """Stripe period; in-class ids cover {p0 + r * delta} in scrambled order."""
    return _BASE_PERIOD + _period_rank(class_id, num_inclass) * _PERIOD_STEP


def level_for_class(class_id: int, num_inclass: int) -> float:
    """Stripe base brightness; a second subtle per-class cue."""
    c = class_id % num_inclass
    span = max(num_inclass - 1, 1)
    return _LEVEL_LO + (_LEVEL_HI - _LEVEL_LO) * c / span


def orientation_for_class(class_id: int, num_inclass: int) -> float:
    """Stripe orientation; the only two flip-safe angles alternate in-class.

    Horizontal and vertical stripes are each their own mirror image, so
    horizontal flips stay label-preserving while neighboring in-class ids
    differ by a quarter turn.  Out-of-class groups use rotated orientations
    that mirror onto each other but never onto an in-class angle.
    """
    group = class_id // num_inclass
    if group == 0:
        return (class_id % 2) * (math.pi / 2.0)
    return (group * math.pi / 3.0) % math.pi


def _render_background(rng: np.random.Generator, size: int) -> np.ndarray:
    level = _BASE_LEVELS[rng.integers(0, len(_BASE_LEVELS))]
    tint = _TINTS[rng.integers(0, len(_TINTS))]
    img = np.empty((size, size, 3), dtype=np.float64)
    for c in range(3):
        img[:, :, c] = level + tint[c]

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_blobs = int(rng.integers(5, 13))
    for _ in range(n_blobs):
        cy = rng.uniform(0, size)
        cx = rng.uniform(0, size)
        a = rng.uniform(2.0, size / 3.0)
        b = rng.uniform(2.0, size / 3.0)
        theta = rng.uniform(0, math.pi)
        amp = rng.uniform(-_ELLIPSE_AMPLITUDE, _ELLIPSE_AMPLITUDE)
        dy = yy - cy
        dx = xx - cx
        u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
        img += (amp * np.exp(-(u * u + v * v)))[:, :, None]

    img += rng.normal(0.0, _NOISE_SIGMA, size=(size, size, 3))
    return img


def _stripe_patch(side: int, period: float, orientation: float, phase: float,
                  level: float = 0.5) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    proj = xx * math.cos(orientation) + yy * math.sin(orientation)
    return level + _STRIPE_AMPLITUDE * np.sin(2.0 * math.pi * proj / period + phase)


def _box_side_for_band(shot: str, size: int, rng: np.random.Generator) -> tuple[int, float]:
    lo, hi = SHOT_BANDS[shot]
    area = size * size
    s_min = math.ceil(math.sqrt(lo * area))
    s_max = min(size, math.floor(math.sqrt(hi * area)))
    if s_min > s_max:
        raise ValidationError(
            f"gen spec field 'image_size': {size} too small for the '{shot}' area band"
        )
    target = rng.uniform(lo, hi)
    side = int(np.clip(round(math.sqrt(target * area)), s_min, s_max))
    return side, side * side / area


def _place_box(rng: np.random.Generator, size: int, side: int) -> tuple[int, int]:
    # center-biased placement; jitter kept moderate so pooled-feature
    # clusters are dominated by palette and coverage, not position
    span = size - side
    top = round(span / 2 + rng.uniform(-1, 1) * _POSITION_JITTER * span)
    left = round(span / 2 + rng.uniform(-1, 1) * _POSITION_JITTER * span)
    return int(np.clip(top, 0, span)), int(np.clip(left, 0, span))


def render_example_image(
    rng: np.random.Generator,
    size: int,
    class_id: int,
    num_inclass: int,
    shot: str,
) -> tuple[np.ndarray, float]:
    """Render one image; returns (image, realized target area ratio).

    Draw order is fixed: box geometry, background, then stripe phase.
    """
    side, ratio = _box_side_for_band(shot, size, rng)
    top, left = _place_box(rng, size, side)
    img = _render_background(rng, size)
    phase = rng.uniform(0, 2 * math.pi)
    patch = _stripe_patch(
        side,
        period_for_class(class_id, num_inclass),
        orientation_for_class(class_id, num_inclass),
        phase,
        level_for_class(class_id, num_inclass),
    )
    img[top : top + side, left : left + side, :] = patch[:, :, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32), ratio


def _imbalanced_counts(total: int, num_classes: int, exponent: float) -> list[int]:
    """Per-class counts following count ~ rank^(-exponent), summing to total."""
    weights = np.array([(c + 1) ** (-exponent) for c in range(num_classes)])
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(int)
    counts = np.maximum(counts, 1)
    # largest-remainder rounding, ties to the lower class id
    while counts.sum() > total:
        counts[int(np.argmax(counts))] -= 1
    remainder = total - counts.sum()
    if remainder > 0:
        order = np.argsort(-(quotas - np.floor(quotas)), kind="stable")
        for idx in order[:remainder]:
            counts[idx] += 1
    if counts.max() < 3 * counts.min():
        raise ValidationError(
            "gen spec field 'imbalance_exponent' too small: labeled split would not "
            "reach the 3x max/min per-class imbalance"
        )
    return counts.tolist()


def _draw_shot(rng: np.random.Generator, shot_mix) -> str:
    u = rng.uniform()
    acc = 0.0
    for shot, p in zip(SHOTS, shot_mix):
        acc += p
        if u < acc:
            return shot
    return SHOTS[-1]


def _make_example(
    spec: GenSpec, split_idx: int, index: int, ident: str, class_id: int, labeled: bool
) -> Example:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, split_idx, index)))
    shot = _draw_shot(rng, spec.shot_mix)
    image, ratio = render_example_image(
        rng, spec.image_size, class_id, spec.num_inclass_classes, shot
    )
    return Example(
        id=ident,
        image=image,
        label=class_id if labeled else None,
        hidden_label=class_id,
        shot=shot,
        target_area_ratio=ratio,
    )


def generate(spec: GenSpec) -> DatasetBundle:
    """Build the five-split bundle deterministically from `spec`."""
    spec.validate()
    n_in = spec.num_inclass_classes
    n_out = spec.num_outclass_classes

    train_counts = _imbalanced_counts(spec.labeled_train, n_in, spec.imbalance_exponent)
    train_classes = [c for c, n in enumerate(train_counts) for _ in range(n)]
    val_classes = [c for c in range(n_in) for _ in range(spec.validation // n_in)]

    def uniform_classes(split_idx: int, count: int, lo: int, hi: int) -> list[int]:
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, split_idx, 1 << 30)))
        return [int(v) for v in rng.integers(lo, hi, size=count)]

    splits = [
        ("tr", 0, train_classes, True),
        ("va", 1, val_classes, True),
        ("in", 2, uniform_classes(2, spec.inclass_unlabeled, 0, n_in), False),
        ("out", 3, uniform_classes(3, spec.outclass_unlabeled, n_in, n_in + n_out), False),
        ("te", 4, uniform_classes(4, spec.test, 0, n_in), False),
    ]
    built: list[list[Example]] = []
    for prefix, split_idx, classes, labeled in splits:
        examples = [
            _make_example(spec, split_idx, i, f"{prefix}-{i:05d}", class_id, labeled)
            for i, class_id in enumerate(classes)
        ]
        built.append(examples)

    return DatasetBundle(
        labeled_train=built[0],
        validation=built[1],
        inclass_unlabeled=built[2],
        outclass_unlabeled=built[3],
        test=built[4],
        num_inclass_classes=n_in,
        num_outclass_classes=n_out,
        gen_spec=spec,
    )


def validate_bundle(bundle: DatasetBundle) -> None:
    """Check all structural invariants; raises IntegrityError on violation."""
    seen_ids: set[str] = set()
    n_in = bundle.num_inclass_classes
    for split_name, examples in bundle.splits().items():
        for ex in examples:
            if ex.id in seen_ids:
                raise IntegrityError(f"duplicate example id '{ex.id}'")
            seen_ids.add(ex.id)
            try:
                validate_image(ex.image)
            except ValueError as exc:
                raise IntegrityError(f"example '{ex.id}': {exc}") from exc
            if ex.shot not in SHOTS:
                raise IntegrityError(f"example '{ex.id}': unknown shot '{ex.shot}'")
            lo, hi = SHOT_BANDS[ex.shot]
            if not (lo <= ex.target_area_ratio <= hi):
                raise IntegrityError(
                    f"example '{ex.id}': area ratio {ex.target_area_ratio} outside "
                    f"the '{ex.shot}' band [{lo}, {hi}]"
                )
            if ex.label is not None and ex.label != ex.hidden_label:
                raise IntegrityError(f"example '{ex.id}': label != hidden_label")
            if split_name == "outclass_unlabeled":
                if 0 <= ex.hidden_label < n_in:
                    raise IntegrityError(
                        f"example '{ex.id}': out-of-class hidden label {ex.hidden_label} "
                        f"falls inside the in-class range [0, {n_in})"
                    )
    val_counts: dict[int, int] = {}
    for ex in bundle.validation:
        val_counts[ex.hidden_label] = val_counts.get(ex.hidden_label, 0) + 1
    if bundle.validation:
        expected = set(range(n_in))
        if set(val_counts) != expected or len(set(val_counts.values())) != 1:
            raise IntegrityError("validation split is not exactly balanced")
    train_counts: dict[int, int] = {}
    for ex in bundle.labeled_train:
        train_counts[ex.hidden_label] = train_counts.get(ex.hidden_label, 0) + 1
    if train_counts and max(train_counts.values()) < 3 * min(train_counts.values()):
        raise IntegrityError("labeled split does not reach the 3x per-class imbalance")


def _spec_to_json(spec: GenSpec | None):
    if spec is None:
        return None
    data = asdict(spec)
    data["shot_mix"] = list(spec.shot_mix)
    return data


def _spec_from_json(data) -> GenSpec | None:
    if data is None:
        return None
    data = dict(data)
    data["shot_mix"] = tuple(data["shot_mix"])
    return GenSpec(**data)


def save_bundle(bundle: DatasetBundle, directory: str | Path) -> None:
    """Write the manifest plus one tensor file per image under `directory`."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "images").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create bundle directory {directory}: {exc}") from exc

    manifest: dict = {
        "version": MANIFEST_VERSION,
        "gen_spec": _spec_to_json(bundle.gen_spec),
        "num_inclass_classes": bundle.num_inclass_classes,
        "num_outclass_classes": bundle.num_outclass_classes,
        "splits": {},
    }
    for split_name, examples in bundle.splits().items():
        rows = []
        for ex in examples:
            rel = f"images/{ex.id}.fmt1"
            write_tensor(directory / rel, ex.image)
            rows.append(
                {
                    "id": ex.id,
                    "file": rel,
                    "label": ex.label,
                    "hidden_label": ex.hidden_label,
                    "shot": ex.shot,
                    "target_area_ratio": ex.target_area_ratio,
                }
            )
        manifest["splits"][split_name] = rows
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def load_bundle(directory: str | Path) -> DatasetBundle:
    """Read a bundle written by save_bundle, validating every invariant."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise IntegrityError(f"missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt manifest {manifest_path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise IntegrityError(f"unsupported manifest version {manifest.get('version')!r}")

    split_lists: dict[str, list[Example]] = {}
    for split_name in ("labeled_train", "validation", "inclass_unlabeled",
                       "outclass_unlabeled", "test"):
        rows = manifest.get("splits", {}).get(split_name)
        if rows is None:
            raise IntegrityError(f"manifest is missing split '{split_name}'")
        examples = []
        for row in rows:
            try:
                image = read_tensor(directory / row["file"])
            except TensorFormatError as exc:
                raise IntegrityError(str(exc)) from exc
            examples.append(
                Example(
                    id=row["id"],
                    image=image,
                    label=row["label"],
                    hidden_label=row["hidden_label"],
                    shot=row["shot"],
                    target_area_ratio=row["target_area_ratio"],
                )
            )
        split_lists[split_name] = examples

    bundle = DatasetBundle(
        labeled_train=split_lists["labeled_train"],
        validation=split_lists["validation"],
        inclass_unlabeled=split_lists["inclass_unlabeled"],
        outclass_unlabeled=split_lists["outclass_unlabeled"],
        test=split_lists["test"],
        num_inclass_classes=manifest["num_inclass_classes"],
        num_outclass_classes=manifest["num_outclass_classes"],
        gen_spec=_spec_from_json(manifest.get("gen_spec")),
    )
    validate_bundle(bundle)
    return bundle

"""Small differentiable classifier: two strided conv stages, global average
pooling, and a linear head, trained by plain SGD with hand-written
reverse-mode gradients.

The pooled feature width is fixed at 16 regardless of input resolution, so
the head can be retrained at a higher resolution with frozen features
(resolution-fix finetuning).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ValidationError
from .imageops import resize_batch, resize_bilinear, validate_image
from .tensorio import TensorFormatError, read_tensor, write_tensor

_KERNEL = 3
_STRIDE = 2
_STAGE_CHANNELS = (8, 16)
_FEATURE_DIM = _STAGE_CHANNELS[-1]


@dataclass
class Classifier:
    """Immutable-by-convention parameter set; training returns new copies."""

    conv1_w: np.ndarray  # (3, 3, in, 8)
    conv1_b: np.ndarray  # (8,)
    conv2_w: np.ndarray  # (3, 3, 8, 16)
    conv2_b: np.ndarray  # (16,)
    head_w: np.ndarray   # (num_classes, 16)
    head_b: np.ndarray   # (num_classes,)
    num_classes: int
    input_resolution: int

    def copy(self) -> "Classifier":
        return Classifier(
            conv1_w=self.conv1_w.copy(), conv1_b=self.conv1_b.copy(),
            conv2_w=self.conv2_w.copy(), conv2_b=self.conv2_b.copy(),
            head_w=self.head_w.copy(), head_b=self.head_b.copy(),
            num_classes=self.num_classes, input_resolution=self.input_resolution,
        )

    def at_resolution(self, resolution: int) -> "Classifier":
        """Same weights read at another input size; pooling keeps shapes legal."""
        if resolution < 8:
            raise ValidationError("input resolution must be >= 8")
        out = self.copy()
        out.input_resolution = resolution
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "conv1_w": self.conv1_w, "conv1_b": self.conv1_b,
            "conv2_w": self.conv2_w, "conv2_b": self.conv2_b,
            "head_w": self.head_w, "head_b": self.head_b,
        }


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    base_lr: float = 0.025
    warmup_epochs: int = 5
    label_smooth_eps: float = 0.2
    crop_size: int = 32
    cutmix: bool = False
    cutmix_alpha: float = 0.2
    rcm: bool = False
    rcm_grid: int = 4
    rcm_k: int = 1
    attention_aug: bool = False
    flip: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError("train config field 'epochs' must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("train config field 'batch_size' must be >= 1")
        if self.base_lr <= 0:
            raise ValidationError("train config field 'base_lr' must be > 0")
        if not (0 <= self.label_smooth_eps < 1):
            raise ValidationError("train config field 'label_smooth_eps' must lie in [0, 1)")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ValidationError("train config field 'warmup_epochs' must lie in [0, epochs)")
        if self.crop_size < 8:
            raise ValidationError("train config field 'crop_size' must be >= 8")
        if self.rcm and self.crop_size % self.rcm_grid != 0:
            raise ValidationError("train config field 'rcm_grid' must divide crop_size")
        if self.rcm and not (0 <= self.rcm_k < self.rcm_grid):
            raise ValidationError("train config field 'rcm_k' must lie in [0, rcm_grid)")
        if self.cutmix and self.cutmix_alpha <= 0:
            raise ValidationError("train config field 'cutmix_alpha' must be > 0")


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init(num_classes: int, seed: int, input_resolution: int = 32) -> Classifier:
    """Fresh classifier with Glorot-uniform weights and zero biases."""
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    c1, c2 = _STAGE_CHANNELS
    k = _KERNEL
    conv1_w = _glorot(rng, (k, k, 3, c1), fan_in=k * k * 3, fan_out=k * k * c1)
    conv2_w = _glorot(rng, (k, k, c1, c2), fan_in=k * k * c1, fan_out=k * k * c2)
    head_w = _glorot(rng, (num_classes, c2), fan_in=c2, fan_out=num_classes)
    return Classifier(
        conv1_w=conv1_w, conv1_b=np.zeros(c1),
        conv2_w=conv2_w, conv2_b=np.zeros(c2),
        head_w=head_w, head_b=np.zeros(num_classes),
        num_classes=num_classes, input_resolution=input_resolution,
    )


def with_new_head(model: Classifier, num_classes: int, seed: int) -> Classifier:
    """Keep the conv stages, replace the head for a new label space."""
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    head_w = _glorot(rng, (num_classes, _FEATURE_DIM),
                     fan_in=_FEATURE_DIM, fan_out=num_classes)
    return Classifier(
        conv1_w=model.conv1_w.copy(), conv1_b=model.conv1_b.copy(),
        conv2_w=model.conv2_w.copy(), conv2_b=model.conv2_b.copy(),
        head_w=head_w, head_b=np.zeros(num_classes),
        num_classes=num_classes, input_resolution=model.input_resolution,
    )


def _out_side(side: int) -> int:
    return (side - _KERNEL) // _STRIDE + 1


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, oh, ow, 3*3*C) patches for stride-2 valid conv."""
    n, h, w, c = x.shape
    oh, ow = _out_side(h), _out_side(w)
    s = x.strides
    shape = (n, oh, ow, _KERNEL, _KERNEL, c)
    strides = (s[0], s[1] * _STRIDE, s[2] * _STRIDE, s[1], s[2], s[3])
    patches = np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides)
    return patches.reshape(n, oh, ow, _KERNEL * _KERNEL * c)


def _col2im(dpatches: np.ndarray, h: int, w: int) -> np.ndarray:
    """Scatter-add patch gradients back onto the (N, h, w, C) input grid."""
    n, oh, ow, _, _, c = dpatches.shape
    dx = np.zeros((n, h, w, c))
    for a in range(_KERNEL):
        for b in range(_KERNEL):
            dx[:, a : a + oh * _STRIDE : _STRIDE, b : b + ow * _STRIDE : _STRIDE, :] += (
                dpatches[:, :, :, a, b, :]
            )
    return dx


def _forward_batch(model: Classifier, x: np.ndarray, keep: bool = False):
    """Run the network on pre-resized (N, r, r, C) float inputs.

    Returns (logits, a2) and, when `keep`, the caches needed for backward.
    """
    x = x.astype(np.float64, copy=False)
    col1 = _im2col(x)
    w1 = model.conv1_w.reshape(-1, _STAGE_CHANNELS[0])
    z1 = col1 @ w1 + model.conv1_b
    a1 = np.maximum(z1, 0.0)
    col2 = _im2col(a1)
    w2 = model.conv2_w.reshape(-1, _STAGE_CHANNELS[1])
    z2 = col2 @ w2 + model.conv2_b
    a2 = np.maximum(z2, 0.0)
    feat = a2.mean(axis=(1, 2))
    logits = feat @ model.head_w.T + model.head_b
    if not keep:
        return logits, a2, None
    cache = {"col1": col1, "z1": z1, "col2": col2, "z2": z2, "a2": a2, "feat": feat}
    return logits, a2, cache


def _backward_batch(model: Classifier, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    feat, a2, z2, col2 = cache["feat"], cache["a2"], cache["z2"], cache["col2"]
    z1, col1 = cache["z1"], cache["col1"]
    n, o2, _, c2 = a2.shape
    o1 = z1.shape[1]

    grads: dict[str, np.ndarray] = {}
    grads["head_w"] = dlogits.T @ feat
    grads["head_b"] = dlogits.sum(axis=0)
    dfeat = dlogits @ model.head_w
    da2 = np.broadcast_to(dfeat[:, None, None, :] / (o2 * o2), a2.shape)
    dz2 = np.where(z2 > 0, da2, 0.0)

    dz2_flat = dz2.reshape(-1, c2)
    grads["conv2_w"] = (col2.reshape(-1, col2.shape[-1]).T @ dz2_flat).reshape(model.conv2_w.shape)
    grads["conv2_b"] = dz2_flat.sum(axis=0)
    w2 = model.conv2_w.reshape(-1, c2)
    dcol2 = (dz2_flat @ w2.T).reshape(n, o2, o2, _KERNEL, _KERNEL, _STAGE_CHANNELS[0])
    da1 = _col2im(dcol2, o1, o1)
    dz1 = np.where(z1 > 0, da1, 0.0)

    c1 = _STAGE_CHANNELS[0]
    dz1_flat = dz1.reshape(-1, c1)
    grads["conv1_w"] = (col1.reshape(-1, col1.shape[-1]).T @ dz1_flat).reshape(model.conv1_w.shape)
    grads["conv1_b"] = dz1_flat.sum(axis=0)
    return grads


def forward(model: Classifier, image: np.ndarray, resolution: int):
    """Logits (pre-softmax) and last-stage feature map for one image."""
    validate_image(image)
    if resolution < 8:
        raise ValidationError("resolution must be >= 8")
    x = resize_bilinear(image, resolution, resolution)[None]
    logits, a2, _ = _forward_batch(model, x)
    return logits[0], a2[0]


def attention(model: Classifier, image: np.ndarray, resolution: int) -> np.ndarray:
    """Channel-mean absolute activation map, max-normalized to peak 1."""
    _, features = forward(model, image, resolution)
    return attention_from_features(features)


def attention_from_features(features: np.ndarray) -> np.ndarray:
    amap = np.abs(features).mean(axis=-1)
    peak = amap.max()
    if peak > 0:
        amap = amap / peak
    return amap


def smooth_targets(label: int, num_classes: int, eps: float) -> np.ndarray:
    """(1-eps) * onehot + eps / num_classes."""
    if not (0 <= eps < 1):
        raise ValidationError("label smoothing eps must lie in [0, 1)")
    if not (0 <= label < num_classes):
        raise ValidationError(f"label {label} outside [0, {num_classes})")
    target = np.full(num_classes, eps / num_classes)
    target[label] += 1.0 - eps
    return target


def loss(logits: np.ndarray, target: np.ndarray) -> float:
    """Cross-entropy against a probability vector, log-sum-exp stabilized."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ValidationError(
            f"logits length {logits.shape} != target length {target.shape}"
        )
    m = logits.max()
    lse = m + math.log(np.exp(logits - m).sum())
    return float(lse - float(target @ logits))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero."""
    if not (0 <= step < total_steps):
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    warmup_steps = (cfg.warmup_epochs * total_steps) // cfg.epochs
    if step < warmup_steps:
        return cfg.base_lr * (step + 1) / warmup_steps
    span = total_steps - warmup_steps
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


def _augment_batch(images, targets, rng, cfg: TrainConfig, model: Classifier):
    # fixed pass order keeps the rng stream stable: flip, rcm, attention, cutmix
    from . import augment as aug

    n = images.shape[0]
    if cfg.flip:
        flips = rng.uniform(size=n) < 0.5
        for i in np.nonzero(flips)[0]:
            images[i] = images[i, :, ::-1].copy()
    if cfg.rcm:
        apply = rng.uniform(size=n) < 0.5
        for i in np.nonzero(apply)[0]:
            perm = aug.rcm_permutation(cfg.rcm_grid, cfg.rcm_k, rng=rng)
            images[i], _ = aug.rcm_destruct(images[i], perm)
    if cfg.attention_aug:
        apply = rng.uniform(size=n) < 0.5
        idx = np.nonzero(apply)[0]
        if idx.size:
            _, a2, _ = _forward_batch(model, images[idx])
            for j, i in enumerate(idx):
                amap = attention_from_features(a2[j])
                if rng.uniform() < 0.5:
                    images[i] = aug.attention_crop(
                        images[i], amap, 0.5, images.shape[1]
                    ).astype(np.float64)
                else:
                    images[i] = aug.attention_drop(images[i], amap, 0.5)
    if cfg.cutmix:
        apply = rng.uniform(size=n) < 0.5
        partners = rng.integers(0, n, size=n)
        base_images = images.copy()
        base_targets = targets.copy()
        for i in np.nonzero(apply)[0]:
            j = int(partners[i])
            mixed = aug.cutmix_arrays(
                base_images[i], base_targets[i], base_images[j], base_targets[j],
                cfg.cutmix_alpha, rng=rng,
            )
            images[i] = mixed.image
            targets[i] = mixed.target
    return images, targets


def _run_sgd(model: Classifier, data, cfg: TrainConfig, head_only: bool,
             resolution: int) -> tuple[Classifier, list[float]]:
    if not data:
        raise ValidationError("training data must be non-empty")
    for ex, target in data:
        if len(target) != model.num_classes:
            raise ValidationError(
                f"target length {len(target)} != num_classes {model.num_classes}"
            )
    images = np.stack([ex.image for ex, _ in data]).astype(np.float64)
    images = resize_batch(images, resolution, resolution).astype(np.float64)
    targets = np.stack([np.asarray(t, dtype=np.float64) for _, t in data])

    out = model.copy()
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5D)))

    curve: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            x = images[batch_idx].copy()
            t = targets[batch_idx].copy()
            if not head_only:
                x, t = _augment_batch(x, t, rng, cfg, out)
            logits, _, cache = _forward_batch(out, x, keep=True)
            probs = softmax(logits)
            m = logits.max(axis=1, keepdims=True)
            lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
            batch_losses = lse - np.einsum("ij,ij->i", t, logits)
            batch_loss = float(batch_losses.mean())
            if not math.isfinite(batch_loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, step {step}"
                )
            epoch_loss += batch_losses.sum()
            dlogits = (probs - t) / len(batch_idx)
            grads = _backward_batch(out, cache, dlogits)
            lr = lr_at(step, total_steps, cfg)
            if head_only:
                out.head_w = out.head_w - lr * grads["head_w"]
                out.head_b = out.head_b - lr * grads["head_b"]
            else:
                out.conv1_w = out.conv1_w - lr * grads["conv1_w"]
                out.conv1_b = out.conv1_b - lr * grads["conv1_b"]
                out.conv2_w = out.conv2_w - lr * grads["conv2_w"]
                out.conv2_b = out.conv2_b - lr * grads["conv2_b"]
                out.head_w = out.head_w - lr * grads["head_w"]
                out.head_b = out.head_b - lr * grads["head_b"]
            step += 1
        curve.append(epoch_loss / n)
    out.input_resolution = resolution
    return out, curve


def train(model: Classifier, data, cfg: TrainConfig) -> tuple[Classifier, list[float]]:
    """SGD with the warmup+cosine schedule and per-batch augmentation.

    `data` is a list of (Example, target-vector) pairs. Returns a new model
    trained at cfg.crop_size plus the per-epoch mean loss curve.
    """
    cfg.validate()
    return _run_sgd(model, data, cfg, head_only=False, resolution=cfg.crop_size)


def fix_finetune(model: Classifier, data, high_resolution: int,
                 cfg: TrainConfig) -> Classifier:
    """Freeze conv stages and retrain only the head at a higher resolution."""
    cfg.validate()
    if high_resolution <= model.input_resolution:
        raise ValidationError(
            f"fix resolution {high_resolution} must exceed the trained "
            f"resolution {model.input_resolution}"
        )
    tuned, _ = _run_sgd(model, data, cfg, head_only=True, resolution=high_resolution)
    return tuned


def predict_logits(model: Classifier, images: np.ndarray, resolution: int,
                   chunk: int = 512) -> np.ndarray:
    """Batched inference on an (N, H, W, C) stack; resizes to `resolution`."""
    outs = []
    for start in range(0, len(images), chunk):
        x = resize_batch(images[start : start + chunk], resolution, resolution)
        logits, _, _ = _forward_batch(model, x.astype(np.float64))
        outs.append(logits)
    return np.concatenate(outs, axis=0)


_MODEL_META = "model.json"


def save_model(model: Classifier, directory: str | Path) -> None:
    """Write model.json plus one binary tensor file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(model.parameters())
    meta = {
        "num_classes": model.num_classes,
        "input_resolution": model.input_resolution,
        "parameters": {name: f"{name}.fmt1" for name in names},
    }
    with open(directory / _MODEL_META, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    params = model.parameters()
    for name in names:
        write_tensor(directory / f"{name}.fmt1", params[name])


_PARAM_SHAPES = {
    "conv1_w": (_KERNEL, _KERNEL, 3, _STAGE_CHANNELS[0]),
    "conv1_b": (_STAGE_CHANNELS[0],),
    "conv2_w": (_KERNEL, _KERNEL, _STAGE_CHANNELS[0], _STAGE_CHANNELS[1]),
    "conv2_b": (_STAGE_CHANNELS[1],),
}


def load_model(directory: str | Path) -> Classifier:
    """Inverse of save_model; storage is float32, compute stays float64."""
    directory = Path(directory)
    meta_path = directory / _MODEL_META
    if not meta_path.is_file():
        raise IntegrityError(f"missing model metadata file {meta_path}")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt model metadata in {meta_path}: {exc}") from exc
    try:
        num_classes = int(meta["num_classes"])
        input_resolution = int(meta["input_resolution"])
        files = dict(meta["parameters"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"malformed model metadata in {meta_path}: {exc}") from exc

    expected = dict(_PARAM_SHAPES)
    expected["head_w"] = (num_classes, _FEATURE_DIM)
    expected["head_b"] = (num_classes,)
    if set(files) != set(expected):
        raise IntegrityError(
            f"model metadata in {meta_path} lists parameters {sorted(files)}, "
            f"expected {sorted(expected)}"
        )
    params = {}
    for name, fname in files.items():
        try:
            arr = read_tensor(directory / fname)
        except TensorFormatError as exc:
            raise IntegrityError(str(exc)) from exc
        if arr.shape != expected[name]:
            raise IntegrityError(
                f"parameter {name} in {directory} has shape {arr.shape}, "
                f"expected {expected[name]}"
            )
        params[name] = arr.astype(np.float64)
    return Classifier(
        conv1_w=params["conv1_w"], conv1_b=params["conv1_b"],
        conv2_w=params["conv2_w"], conv2_b=params["conv2_b"],
        head_w=params["head_w"], head_b=params["head_b"],
        num_classes=num_classes, input_resolution=input_resolution,
    )


def grad_check(model: Classifier, image: np.ndarray, target: np.ndarray,
               epsilon: float) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if not (1e-6 <= epsilon <= 1e-2):
        raise ValidationError("epsilon must lie in [1e-6, 1e-2]")
    resolution = model.input_resolution
    x = resize_bilinear(image, resolution, resolution)[None].astype(np.float64)
    target = np.asarray(target, dtype=np.float64)

    logits, _, cache = _forward_batch(model, x, keep=True)
    dlogits = softmax(logits) - target[None]
    grads = _backward_batch(model, cache, dlogits)

    work = model.copy()

    def loss_at() -> float:
        lg, _, _ = _forward_batch(work, x)
        return loss(lg[0], target)

    worst = 0.0
    for name, param in work.parameters().items():
        flat = param.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = loss_at()
            flat[i] = orig - epsilon
            lo = loss_at()
            flat[i] = orig
            numeric = (hi - lo) / (2 * epsilon)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst

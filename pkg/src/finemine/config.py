"""Run configuration: one strict JSON document driving the whole pipeline.

Unknown keys are rejected at every level so typos fail loudly instead of
silently falling back to defaults.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ValidationError
from .fusion import SHOT_NAMES, FusionPlan
from .mining import MiningConfig
from .model import TrainConfig
from .synth import GenSpec

TTA_MODES = ("none", "three", "144")

# augmentation profiles: the generic model trains on plain flipped crops,
# the fine-grained one adds attention-guided views; box mixing and region
# shuffling stay available as overrides but cost accuracy at this scale
DEFAULT_PROFILES: dict[str, dict] = {
    "generic": {"cutmix": False, "rcm": False, "attention_aug": False},
    "finegrained": {"cutmix": False, "rcm": False, "attention_aug": True},
}


@dataclass
class ClusterConfig:
    # None means half the number of out-of-class classes: the 16-feature
    # pooled bottleneck cannot separate many more clusters than that
    k: int | None = None
    holdout_frac: float = 0.1
    epochs: int = 200
    warmup_epochs: int = 10

    def validate(self) -> None:
        if self.k is not None and self.k < 2:
            raise ValidationError("cluster config field 'k' must be >= 2")
        if not (0 < self.holdout_frac < 1):
            raise ValidationError(
                "cluster config field 'holdout_frac' must lie in (0, 1)"
            )
        if self.epochs < 1:
            raise ValidationError("cluster config field 'epochs' must be >= 1")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ValidationError(
                "cluster config field 'warmup_epochs' must lie in [0, epochs)"
            )


@dataclass
class TtaConfig:
    mode: str = "three"
    scales: tuple[int, ...] = (36, 40, 44, 48)

    def validate(self) -> None:
        if self.mode not in TTA_MODES:
            raise ValidationError(
                f"tta config field 'mode' must be one of {TTA_MODES}"
            )
        if not self.scales:
            raise ValidationError("tta config field 'scales' must be non-empty")
        if any(int(s) != s or s < 1 for s in self.scales):
            raise ValidationError(
                "tta config field 'scales' entries must be positive integers"
            )


@dataclass
class FixConfig:
    enabled: bool = True
    resolution: int = 64
    # the head must fully converge at the new resolution; a short pass
    # leaves it miscalibrated against upscaled features and loses accuracy
    epochs: int = 200

    def validate(self, crop_size: int) -> None:
        if not self.enabled:
            return
        if self.resolution <= crop_size:
            raise ValidationError(
                "fix config field 'resolution' must exceed the training crop size"
            )
        if self.epochs < 1:
            raise ValidationError("fix config field 'epochs' must be >= 1")


def _default_run_train() -> TrainConfig:
    # small-data recipe: tiny batches with a hot, long-warmup schedule; the
    # TrainConfig class defaults stay the generic large-batch starting point
    return TrainConfig(epochs=600, batch_size=8, base_lr=0.3, warmup_epochs=30)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    gen: GenSpec = field(default_factory=GenSpec)
    train: TrainConfig = field(default_factory=_default_run_train)
    profiles: dict[str, dict] = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_PROFILES.items()}
    )
    ensemble_seeds: tuple[int, ...] = (0, 1, 2)
    mining: MiningConfig = field(default_factory=MiningConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    fusion_plan: FusionPlan = field(default_factory=FusionPlan)
    tta: TtaConfig = field(default_factory=TtaConfig)
    fix: FixConfig = field(default_factory=FixConfig)

    def validate(self) -> None:
        self.gen.validate()
        self.train.validate()
        self.mining.validate()
        self.cluster.validate()
        self.fusion_plan.validate()
        self.tta.validate()
        self.fix.validate(self.train.crop_size)
        if not self.out_dir:
            raise ValidationError("config field 'out_dir' must be non-empty")
        if not self.ensemble_seeds:
            raise ValidationError("config field 'ensemble_seeds' must be non-empty")
        if len(set(self.ensemble_seeds)) != len(self.ensemble_seeds):
            raise ValidationError("config field 'ensemble_seeds' must be unique")
        allowed = {f.name for f in fields(TrainConfig)}
        for name, overrides in self.profiles.items():
            if name not in DEFAULT_PROFILES:
                raise ValidationError(
                    f"unknown profile {name!r}; use {sorted(DEFAULT_PROFILES)}"
                )
            bad = set(overrides) - allowed
            if bad:
                raise ValidationError(
                    f"profile {name!r} has unknown fields {sorted(bad)}"
                )
        for name in DEFAULT_PROFILES:
            self.profile_train_cfg(name).validate()

    def profile_train_cfg(self, profile: str) -> TrainConfig:
        """The base train config with one profile's overrides applied."""
        if profile not in self.profiles:
            raise ValidationError(f"unknown profile {profile!r}")
        return replace(self.train, **self.profiles[profile])


def _check_keys(data: dict, allowed, where: str) -> None:
    bad = set(data) - set(allowed)
    if bad:
        raise ValidationError(f"unknown keys {sorted(bad)} in {where}")


def _build(cls, data: dict, where: str):
    names = [f.name for f in fields(cls)]
    _check_keys(data, names, where)
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ValidationError("config document must be a JSON object")
    # the JSON document says "fusion" where the dataclass says fusion_plan
    top = [
        "fusion" if f.name == "fusion_plan" else f.name
        for f in fields(RunConfig)
    ]
    _check_keys(data, top, "config")
    kwargs: dict = {}
    for key in ("seed", "out_dir"):
        if key in data:
            kwargs[key] = data[key]
    if "gen" in data:
        gen = dict(data["gen"])
        if "shot_mix" in gen:
            gen["shot_mix"] = tuple(gen["shot_mix"])
        kwargs["gen"] = _build(GenSpec, gen, "config.gen")
    if "train" in data:
        kwargs["train"] = _build(TrainConfig, dict(data["train"]), "config.train")
    if "profiles" in data:
        profiles = {k: dict(v) for k, v in DEFAULT_PROFILES.items()}
        for name, overrides in dict(data["profiles"]).items():
            if name not in DEFAULT_PROFILES:
                raise ValidationError(
                    f"unknown profile {name!r}; use {sorted(DEFAULT_PROFILES)}"
                )
            profiles[name] = dict(overrides)
        kwargs["profiles"] = profiles
    if "ensemble_seeds" in data:
        kwargs["ensemble_seeds"] = tuple(int(s) for s in data["ensemble_seeds"])
    if "mining" in data:
        kwargs["mining"] = _build(MiningConfig, dict(data["mining"]), "config.mining")
    if "cluster" in data:
        kwargs["cluster"] = _build(ClusterConfig, dict(data["cluster"]), "config.cluster")
    if "fusion" in data:
        fus = dict(data["fusion"])
        _check_keys(fus, ("routing", "t_long", "t_close", "binarize"), "config.fusion")
        if "routing" in fus:
            routing = dict(fus["routing"])
            _check_keys(routing, SHOT_NAMES, "config.fusion.routing")
            fus["routing"] = {
                shot: tuple(float(w) for w in pair)
                for shot, pair in routing.items()
            }
        kwargs["fusion_plan"] = FusionPlan(**fus)
    if "tta" in data:
        tta = dict(data["tta"])
        if "scales" in tta:
            tta["scales"] = tuple(int(s) for s in tta["scales"])
        kwargs["tta"] = _build(TtaConfig, tta, "config.tta")
    if "fix" in data:
        kwargs["fix"] = _build(FixConfig, dict(data["fix"]), "config.fix")
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"malformed config: {exc}") from exc
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    gen = asdict(cfg.gen)
    gen["shot_mix"] = list(cfg.gen.shot_mix)
    return {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "gen": gen,
        "train": asdict(cfg.train),
        "profiles": {k: dict(v) for k, v in cfg.profiles.items()},
        "ensemble_seeds": list(cfg.ensemble_seeds),
        "mining": asdict(cfg.mining),
        "cluster": asdict(cfg.cluster),
        "fusion": {
            "routing": {k: list(v) for k, v in cfg.fusion_plan.routing.items()},
            "t_long": cfg.fusion_plan.t_long,
            "t_close": cfg.fusion_plan.t_close,
            "binarize": cfg.fusion_plan.binarize,
        },
        "tta": {"mode": cfg.tta.mode, "scales": list(cfg.tta.scales)},
        "fix": asdict(cfg.fix),
    }


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {path} does not exist")
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    try:
        return config_from_dict(data)
    except (TypeError, KeyError) as exc:
        raise ValidationError(f"malformed config in {path}: {exc}") from exc


def save_config(cfg: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1, sort_keys=True)
        fh.write("\n")

"""Training configuration: validation, file loading, presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from typing import Optional

from . import networks
from .errors import BadResolution, ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass
class PerturbationModel:
    """How initial placements are corrupted during training.

    sigma: per-element std of the Gaussian warp-parameter draw.
    sigma_scale_range: optional (lo, hi); each sample's Gaussian draw is
    multiplied by u ~ U[lo, hi], spreading training over perturbation
    magnitudes so corrections stay sharp on small residuals too.
    rescale_range: optional uniform foreground rescale (applied as a
    similarity composed into p0).  translation_sigma: optional Gaussian
    translation jitter in image-extent units (1.0 = half the raster,
    i.e. one canonical unit).
    """

    sigma: float = 0.1
    sigma_scale_range: Optional[tuple] = None
    rescale_range: Optional[tuple] = None
    translation_sigma: float = 0.0

    def validate(self, path="perturbation"):
        if self.sigma < 0:
            raise ConfigError(f"{path}.sigma: must be >= 0, got {self.sigma}")
        if self.sigma_scale_range is not None:
            lo, hi = self.sigma_scale_range
            if not (0 <= lo <= hi) or hi == 0:
                raise ConfigError(
                    f"{path}.sigma_scale_range: need 0 <= lo <= hi with "
                    f"hi > 0, got ({lo}, {hi})"
                )
        if self.rescale_range is not None:
            lo, hi = self.rescale_range
            if not (0 < lo <= hi):
                raise ConfigError(
                    f"{path}.rescale_range: need 0 < lo <= hi, got ({lo}, {hi})"
                )
        if self.translation_sigma < 0:
            raise ConfigError(
                f"{path}.translation_sigma: must be >= 0, "
                f"got {self.translation_sigma}"
            )


@dataclass
class TrainConfig:
    n_stages: int = 4
    iters_per_stage: int = 50_000
    batch_size: int = 20
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    lambda_grad: float = 10.0
    lambda_update: float = 0.1
    n_critic: int = 5
    taylor_order: int = 20
    resolution: tuple = (120, 160)
    width_mult: float = 1.0
    depth: int = 5
    seed: int = 0
    perturbation: PerturbationModel = field(default_factory=PerturbationModel)
    finetune_iters: int = 0
    d_pretrain_iters: int = 0
    warm_start: str = "none"  # none | regressor:<checkpoint path>
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    eval_interval: int = 0  # iterations between metric snapshots, 0 = off
    eval_samples: int = 64
    checkpoint_interval: int = 0  # mid-stage checkpoint cadence, 0 = stage ends only
    ma_window: int = 100

    def validate(self):
        pos = (
            "n_stages", "batch_size", "lr_g", "lr_d", "n_critic",
            "taylor_order", "width_mult", "depth", "ma_window",
        )
        for name in pos:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be > 0, got {getattr(self, name)}")
        nonneg = (
            "iters_per_stage", "lambda_grad", "lambda_update", "finetune_iters",
            "d_pretrain_iters", "eval_interval", "eval_samples",
            "checkpoint_interval",
        )
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        if len(self.resolution) != 2:
            raise ConfigError(f"resolution: need (H, W), got {self.resolution}")
        try:
            networks.check_resolution(self.resolution, self.depth)
        except BadResolution as e:
            raise ConfigError(f"resolution: {e}") from e
        if self.warm_start != "none" and not self.warm_start.startswith("regressor:"):
            raise ConfigError(
                f"warm_start: expected 'none' or 'regressor:<path>', "
                f"got {self.warm_start!r}"
            )
        self.perturbation.validate()
        return self

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        pm = d.pop("perturbation")
        for key in ("rescale_range", "sigma_scale_range"):
            if pm[key] is not None:
                pm[key] = list(pm[key])
        d["perturbation"] = pm
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown fields: {', '.join(sorted(unknown))}")
        if "resolution" in d:
            try:
                h, w = d["resolution"]
            except (TypeError, ValueError):
                raise ConfigError(f"resolution: need (H, W), got {d['resolution']}")
            d["resolution"] = (int(h), int(w))
        if "perturbation" in d:
            pd = dict(d["perturbation"])
            pknown = {f.name for f in dataclasses.fields(PerturbationModel)}
            punknown = set(pd) - pknown
            if punknown:
                raise ConfigError(
                    f"perturbation: unknown fields: {', '.join(sorted(punknown))}"
                )
            for key in ("rescale_range", "sigma_scale_range"):
                if pd.get(key) is not None:
                    pd[key] = tuple(pd[key])
            d["perturbation"] = PerturbationModel(**pd)
        return TrainConfig(**d).validate()

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def load_config(path) -> TrainConfig:
    """Read a TrainConfig from a .toml or .json file."""
    text = open(path, "rb").read()
    name = str(path)
    if name.endswith(".toml"):
        try:
            data = tomllib.loads(text.decode("utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    elif name.endswith(".json"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    else:
        raise ConfigError(f"{path}: expected a .toml or .json config file")
    return TrainConfig.from_dict(data)


PRESETS = {
    # full-size cubes recipe: 4 stages, 50K iterations each
    "paper-cubes": dict(
        n_stages=4, iters_per_stage=50_000, lr_g=1e-4, lr_d=1e-4,
        lambda_update=0.1, resolution=(120, 160), width_mult=1.0, depth=5,
    ),
    # indoor-rearrangement recipe: slow generator, warm start, finetune
    "paper-indoor": dict(
        n_stages=4, iters_per_stage=40_000, lr_g=1e-6, lr_d=1e-4,
        lambda_update=0.3, resolution=(120, 160), width_mult=1.0, depth=5,
        finetune_iters=40_000,
        perturbation=PerturbationModel(
            sigma=0.1, rescale_range=(0.9, 1.1), translation_sigma=0.05
        ),
    ),
    # glasses recipe: 5 stages, discriminator pretraining, strong trust region
    "paper-glasses": dict(
        n_stages=5, iters_per_stage=50_000, lr_g=1e-5, lr_d=1e-5,
        lambda_update=1.0, d_pretrain_iters=50_000,
        resolution=(120, 160), width_mult=1.0, depth=5,
        perturbation=PerturbationModel(sigma=0.1, translation_sigma=0.05),
    ),
    # small-machine run: quarter width, 32x32, 2 stages
    "desk": dict(
        n_stages=2, iters_per_stage=5_000, lr_g=1e-4, lr_d=1e-4,
        lambda_update=0.1, resolution=(32, 32), width_mult=0.25, depth=4,
        eval_interval=500, eval_samples=64,
    ),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; have {', '.join(sorted(PRESETS))}"
        )
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return TrainConfig(**kw).validate()

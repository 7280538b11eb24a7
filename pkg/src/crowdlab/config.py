"""Training configuration: defaults, validation, dotted-key overrides and echo."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import LossWeights

REGIMES = ("supervised", "pretrain_finetune", "da_joint")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    regime: str = "supervised"
    lr: float = 1e-5
    lr_decay: float = 0.995
    lnf: float = 100.0
    sigma: float = 4.0
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mtl_seg_weight: float = 0.0
    filter_rule: str | dict | None = None
    density_reg: bool = False
    crop_size: int = 128
    hflip: bool = False
    sfcn_width: int = 16
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    select_by: str = "mae"
    # adaptation
    gan_lr: float = 2e-4
    gan_betas: tuple[float, float] = (0.5, 0.999)
    dc_lr: float = 1e-4
    ngf: int = 16
    n_blocks: int = 3
    ndf: int = 16
    dc_ndf: int = 32
    se_cycle: bool = True
    gan_mode: str = "lsgan"
    adv_features: str = "sfcn"
    adv_reduction: str = "mean"
    count_to_generator: bool = True
    warmup_epochs: int = 0
    collapse_var: float = 1e-6
    collapse_patience: int = 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"], d["gan_betas"] = list(self.betas), list(self.gan_betas)
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_CHOICES = {
    "regime": REGIMES,
    "select_by": ("mae", "miou"),
    "gan_mode": ("lsgan", "bce"),
    "adv_features": ("sfcn", "generator"),
    "adv_reduction": ("mean", "sum"),
}
_POSITIVE = ("lr", "lnf", "sigma", "epochs", "batch_size", "crop_size", "sfcn_width", "eps",
             "gan_lr", "dc_lr", "ngf", "ndf", "dc_ndf", "collapse_patience")
_NON_NEGATIVE = ("mtl_seg_weight", "warmup_epochs", "collapse_var", "n_blocks", "seed")


def _coerce(key, value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind == "pair":
        if isinstance(value, (list, tuple)) and len(value) == 2 and all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return tuple(float(v) for v in value)
    elif kind == "rule":
        if value is None or isinstance(value, (str, dict)):
            return value
    raise ConfigError(f"{key}: expected {getattr(kind, '__name__', kind)}, got {type(value).__name__} {value!r}")


_KINDS = {
    "regime": str, "lr": float, "lr_decay": float, "lnf": float, "sigma": float, "epochs": int,
    "batch_size": int, "seed": int, "mtl_seg_weight": float, "filter_rule": "rule",
    "density_reg": bool, "crop_size": int, "hflip": bool, "sfcn_width": int, "betas": "pair",
    "eps": float, "select_by": str, "gan_lr": float, "gan_betas": "pair", "dc_lr": float, "ngf": int,
    "n_blocks": int, "ndf": int, "dc_ndf": int, "se_cycle": bool, "gan_mode": str,
    "adv_features": str, "adv_reduction": str, "count_to_generator": bool, "warmup_epochs": int,
    "collapse_var": float,
    "collapse_patience": int,
}


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"{key}: {p} is not a section")
    d[parts[-1]] = value


def validate_config(source=None, overrides=()) -> TrainConfig:
    """Normalize a config file path, dict or None (all defaults) into a TrainConfig.

    Unknown keys, type mismatches and out-of-range values raise ConfigError
    naming the offending key.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = json.loads(json.dumps(source))
    else:
        try:
            raw = json.loads(Path(source).read_text() or "{}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: not valid JSON ({exc})") from exc
    for ov in overrides:
        _set_dotted(raw, *_parse_override(ov))

    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

    kwargs = {}
    for key, value in raw.items():
        if key == "loss_weights":
            if not isinstance(value, dict):
                raise ConfigError(f"loss_weights: expected a section, got {value!r}")
            lw_known = {f.name for f in fields(LossWeights)}
            bad = sorted(set(value) - lw_known)
            if bad:
                raise ConfigError(f"unknown config key(s): {', '.join('loss_weights.' + b for b in bad)}")
            lw = {k: _coerce(f"loss_weights.{k}", v, float) for k, v in value.items()}
            for k, v in lw.items():
                if v < 0:
                    raise ConfigError(f"loss_weights.{k}: must be >= 0, got {v}")
            kwargs[key] = LossWeights(**lw)
        else:
            kwargs[key] = _coerce(key, value, _KINDS[key])

    for key, choices in _CHOICES.items():
        if key in kwargs and kwargs[key] not in choices:
            raise ConfigError(f"{key}: {kwargs[key]!r} is not one of {choices}")
    for key in _POSITIVE:
        if key in kwargs and not kwargs[key] > 0:
            raise ConfigError(f"{key}: must be > 0, got {kwargs[key]}")
    for key in _NON_NEGATIVE:
        if key in kwargs and kwargs[key] < 0:
            raise ConfigError(f"{key}: must be >= 0, got {kwargs[key]}")
    if "lr_decay" in kwargs and not 0 < kwargs["lr_decay"] <= 1:
        raise ConfigError(f"lr_decay: must lie in (0, 1], got {kwargs['lr_decay']}")
    if "crop_size" in kwargs and kwargs["crop_size"] % 8:
        raise ConfigError(f"crop_size: must be a multiple of 8, got {kwargs['crop_size']}")
    return TrainConfig(**kwargs)


def write_config(cfg: TrainConfig, directory) -> Path:
    path = Path(directory) / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return path

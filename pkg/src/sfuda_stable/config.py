"""Configuration records for adaptation runs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

METHODS = ("fairld", "ld", "os")
ENTROPY_MODES = ("none", "min", "max")
REFRESH_MODES = ("per_batch", "per_epoch")


@dataclass
class ThresholdConfig:
    """Pseudo-label thresholds: top fraction per class and global floor."""

    alpha: float = 0.3
    lam: float = 0.2

    def validate(self) -> "ThresholdConfig":
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.lam < 1.0:
            raise ConfigError(f"lambda must be in [0, 1), got {self.lam}")
        return self


@dataclass
class BnAdaptConfig:
    momentum: float = 0.1
    passes: int = 1
    train_gamma_beta: bool = False
    entropy_steps: int = 0
    learning_rate: float = 3e-5

    def validate(self) -> "BnAdaptConfig":
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigError(f"momentum must be in (0, 1], got {self.momentum}")
        if self.passes < 1:
            raise ConfigError("passes must be a positive integer")
        if self.entropy_steps < 0:
            raise ConfigError("entropy_steps must be >= 0")
        return self


@dataclass
class AugmentConfig:
    """Which augmentations are enabled and how strongly they act."""

    blur: bool = True
    shift_scale_rotate: bool = True
    brightness_contrast: bool = True
    grid_shuffle: bool = True
    p: float = 0.5
    blur_sigma: tuple[float, float] = (0.3, 1.0)
    shift_limit: float = 0.0625
    scale_limit: float = 0.1
    rotate_limit: float = 15.0
    brightness_limit: float = 0.1
    contrast_limit: float = 0.1
    grid: int = 2

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(blur=False, shift_scale_rotate=False, brightness_contrast=False, grid_shuffle=False)

    def any_enabled(self) -> bool:
        return self.blur or self.shift_scale_rotate or self.brightness_contrast or self.grid_shuffle


@dataclass
class AdaptationConfig:
    method: str = "fairld"
    use_wc: bool = False
    wc_coefficient: float = 1.0
    wc_normalize: bool = False
    use_ei: bool = False
    entropy_mode: str = "none"
    entropy_coefficient: float = 1.0
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 3e-5
    weight_decay: float = 3e-5
    seed: int = 0
    pseudo_label_refresh: str = "per_epoch"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    # BN running statistics stay frozen for pseudo-label methods unless set.
    update_bn_stats: bool = False
    bn: BnAdaptConfig = field(default_factory=BnAdaptConfig)
    probe_epochs: tuple[int, ...] = (1, 2, 3, 5, 10, 20, 50)

    def validate(self) -> "AdaptationConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.entropy_mode not in ENTROPY_MODES:
            raise ConfigError(f"unknown entropy mode {self.entropy_mode!r}; expected one of {ENTROPY_MODES}")
        if self.pseudo_label_refresh not in REFRESH_MODES:
            raise ConfigError(f"unknown pseudo_label_refresh {self.pseudo_label_refresh!r}")
        if self.use_ei and self.entropy_mode == "min":
            raise ConfigError(
                "use_ei cannot be combined with entropy_mode='min': entropy increase already "
                "adds +p log p on labeled pixels and minimization would cancel it"
            )
        for name in ("wc_coefficient", "entropy_coefficient", "learning_rate", "weight_decay"):
            value = getattr(self, name)
            if not (value == value and value >= 0 and value != float("inf")):
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.threshold.validate()
        self.bn.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AdaptationConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown adaptation config keys: {sorted(unknown)}")
        if isinstance(data.get("threshold"), dict):
            data["threshold"] = ThresholdConfig(**data["threshold"])
        if isinstance(data.get("augment"), dict):
            aug = dict(data["augment"])
            if "blur_sigma" in aug:
                aug["blur_sigma"] = tuple(aug["blur_sigma"])
            data["augment"] = AugmentConfig(**aug)
        if isinstance(data.get("bn"), dict):
            data["bn"] = BnAdaptConfig(**data["bn"])
        if "probe_epochs" in data:
            data["probe_epochs"] = tuple(int(e) for e in data["probe_epochs"])
        return cls(**data)

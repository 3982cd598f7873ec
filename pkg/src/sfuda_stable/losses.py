"""Training objectives for pseudo-label self-training.

All probability inputs are softmax outputs with the class axis at ``dim``
(``-1`` for a single H x W x C map, ``1`` for N x C x H x W batches).
Pseudo labels are one-hot along the same axis; an all-zero pixel abstains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .config import ENTROPY_MODES
from .errors import ConfigError
from .snapshot import ParameterSnapshot, check_structure

EPS = 1e-8


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_pair(p: torch.Tensor, y: torch.Tensor) -> None:
    if p.shape != y.shape:
        raise ValueError(f"probability shape {tuple(p.shape)} does not match label shape {tuple(y.shape)}")
    if not torch.isfinite(p).all() or not torch.isfinite(y).all():
        raise ValueError("non-finite values in probabilities or labels")


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(EPS, 1.0))


def _masked_mean(per_pixel: torch.Tensor, labeled: torch.Tensor) -> torch.Tensor:
    count = labeled.sum()
    if count == 0:
        return per_pixel.sum() * 0.0
    return (per_pixel * labeled).sum() / count


def cross_entropy_pseudo(p, y, dim: int = -1) -> torch.Tensor:
    """Mean of -sum_c y log p over labeled pixels; 0 when nothing is labeled."""
    p, y = _as_tensor(p), _as_tensor(y).to(_as_tensor(p).dtype)
    _check_pair(p, y)
    labeled = y.sum(dim=dim)
    per_pixel = -(y * _log(p)).sum(dim=dim)
    return _masked_mean(per_pixel, labeled)


def entropy_increase_loss(p, y, dim: int = -1) -> torch.Tensor:
    """Mean of -sum_c (y - p) log p over labeled pixels.

    Confident pixels (p close to y) contribute little, so samples the model
    has already fit stop dominating the gradient.
    """
    p, y = _as_tensor(p), _as_tensor(y).to(_as_tensor(p).dtype)
    _check_pair(p, y)
    labeled = y.sum(dim=dim)
    per_pixel = -((y - p) * _log(p)).sum(dim=dim)
    return _masked_mean(per_pixel, labeled)


def self_entropy(p, dim: int = -1) -> torch.Tensor:
    """Mean Shannon entropy of the per-pixel class distribution."""
    p = _as_tensor(p)
    if not torch.isfinite(p).all():
        raise ValueError("non-finite values in probabilities")
    return -(p * _log(p)).sum(dim=dim).mean()


def _param_list(theta) -> list[tuple[str, torch.Tensor]]:
    if isinstance(theta, nn.Module):
        return list(theta.named_parameters())
    if isinstance(theta, ParameterSnapshot):
        return list(theta.params)
    return list(theta)


def weight_consolidation_penalty(theta, theta_star: ParameterSnapshot, normalize: bool = False) -> torch.Tensor:
    """L1 distance sum_i |theta_i - theta*_i| over every trainable scalar.

    ``theta`` may be a module, a snapshot, or a list of (name, tensor) pairs.
    With ``normalize`` the sum is divided by the number of scalars.
    """
    theta = _param_list(theta)
    check_structure(theta, theta_star)
    total = None
    for (_, value), (_, ref) in zip(theta, theta_star.params):
        term = (value - ref.to(device=value.device, dtype=value.dtype)).abs().sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    if normalize:
        total = total / theta_star.num_scalars()
    return total


@dataclass
class LossBreakdown:
    adaptation: torch.Tensor
    self_entropy: torch.Tensor
    wc_penalty: torch.Tensor
    total: torch.Tensor
    labeled_pixel_count: int
    entropy_sign: float = 0.0
    entropy_coefficient: float = 0.0
    wc_coefficient: float = 0.0

    def to_dict(self) -> dict:
        return {
            "adaptation": float(self.adaptation),
            "self_entropy": float(self.self_entropy),
            "wc_penalty": float(self.wc_penalty),
            "total": float(self.total),
            "labeled_pixel_count": int(self.labeled_pixel_count),
        }


ENTROPY_SIGN = {"none": 0.0, "min": 1.0, "max": -1.0}


def total_adaptation_loss(p, y, theta, theta_star: ParameterSnapshot | None, config, dim: int = -1) -> LossBreakdown:
    """Compose the adaptation objective selected by ``config``.

    adaptation term (EI or CE) + sign * entropy_coefficient * self_entropy
    + wc_coefficient * L1 anchor, where sign is +1 for ``min``, -1 for
    ``max`` and 0 for ``none``.
    """
    if config.entropy_mode not in ENTROPY_MODES:
        raise ConfigError(f"unknown entropy mode {config.entropy_mode!r}; expected one of {ENTROPY_MODES}")
    p = _as_tensor(p)
    y = _as_tensor(y).to(p.dtype)
    adaptation = entropy_increase_loss(p, y, dim) if config.use_ei else cross_entropy_pseudo(p, y, dim)
    sign = ENTROPY_SIGN[config.entropy_mode]
    ent = self_entropy(p, dim)
    total = adaptation
    if sign:
        total = total + sign * config.entropy_coefficient * ent
    wc_coef = config.wc_coefficient if config.use_wc else 0.0
    if config.use_wc:
        if theta_star is None:
            raise ConfigError("use_wc requires a source snapshot")
        wc = weight_consolidation_penalty(theta, theta_star, getattr(config, "wc_normalize", False))
        total = total + wc_coef * wc
    else:
        wc = torch.zeros((), dtype=total.dtype)
    return LossBreakdown(
        adaptation=adaptation,
        self_entropy=ent,
        wc_penalty=wc,
        total=total,
        labeled_pixel_count=int(y.sum().round().item()),
        entropy_sign=sign,
        entropy_coefficient=config.entropy_coefficient,
        wc_coefficient=wc_coef,
    )

"""Small batch-norm encoder-decoder used as the segmentation backbone."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import BnAdaptConfig
from .errors import ConfigError
from .losses import self_entropy
from .snapshot import ParameterSnapshot

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ModelDescriptor:
    channels: tuple[int, ...] = (16, 32, 64)
    num_classes: int = 3
    in_channels: int = 1

    def validate(self) -> "ModelDescriptor":
        if len(self.channels) < 2:
            raise ConfigError("model needs at least two stages")
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel widths must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "num_classes": self.num_classes, "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelDescriptor":
        return cls(tuple(data["channels"]), int(data["num_classes"]), int(data.get("in_channels", 1)))

    def parameter_count(self) -> int:
        """Trainable scalars: 3x3 convs without bias, BN gamma/beta, 1x1 head with bias."""
        total = 0
        prev = self.in_channels
        for width in self.channels:
            total += prev * width * 9 + 2 * width
            prev = width
        for skip in reversed(self.channels[:-1]):
            total += (prev + skip) * skip * 9 + 2 * skip
            prev = skip
        total += prev * self.num_classes + self.num_classes
        return total


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
        )


class SegModel(nn.Module):
    """Encoder-decoder with skip connections; logits come out N x C x H x W."""

    def __init__(self, descriptor: ModelDescriptor):
        super().__init__()
        self.descriptor = descriptor.validate()
        chans = descriptor.channels
        self.encoders = nn.ModuleList()
        prev = descriptor.in_channels
        for width in chans:
            self.encoders.append(ConvBlock(prev, width))
            prev = width
        self.decoders = nn.ModuleList()
        for skip in reversed(chans[:-1]):
            self.decoders.append(ConvBlock(prev + skip, skip))
            prev = skip
        self.head = nn.Conv2d(prev, descriptor.num_classes, 1)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.descriptor.channels) - 1)

    def descriptor_dict(self) -> dict:
        return self.descriptor.to_dict()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, enc in enumerate(self.encoders):
            if i:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        skips.pop()
        for dec in self.decoders:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)


def build_model(descriptor: ModelDescriptor | None = None, seed: int = 0) -> SegModel:
    """Deterministically initialized model (He fan-in kernels, gamma=1, beta=0)."""
    descriptor = descriptor or ModelDescriptor()
    model = SegModel(descriptor)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()
    return model


def _as_batch(model: SegModel, image) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(image)
    single = x.dim() == 2
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if x.dim() != 4 or x.shape[1] != model.descriptor.in_channels:
        raise ValueError(f"image shape {tuple(torch.as_tensor(image).shape)} does not fit the model input")
    factor = model.downsample_factor
    if x.shape[-1] % factor or x.shape[-2] % factor:
        raise ValueError(f"spatial dims {tuple(x.shape[-2:])} must be divisible by {factor}")
    dtype = next(model.parameters()).dtype
    return x.to(dtype), single


def forward_softmax(model: SegModel, image, train: bool = False) -> torch.Tensor:
    """Class probabilities for one H x W image (-> H x W x C) or a batch (-> N x C x H x W).

    ``train`` normalizes with batch statistics; otherwise running statistics
    are used and the output is independent of batch composition.
    """
    x, single = _as_batch(model, image)
    was_training = model.training
    model.train(train)
    try:
        probs = torch.softmax(model(x), dim=1)
    finally:
        model.train(was_training)
    if single:
        return probs[0].permute(1, 2, 0)
    return probs


def snapshot_parameters(model: nn.Module) -> ParameterSnapshot:
    return ParameterSnapshot.from_model(model)


def restore_model(snapshot: ParameterSnapshot, descriptor: ModelDescriptor | None = None) -> SegModel:
    if descriptor is None:
        descriptor = ModelDescriptor.from_dict(snapshot.meta)
    model = build_model(descriptor)
    return snapshot.restore_into(model)


def bn_layers(model: nn.Module) -> list[nn.BatchNorm2d]:
    return [m for m in model.modules() if isinstance(m, nn.BatchNorm2d)]


def freeze_bn_statistics(model: nn.Module) -> None:
    """Put BN layers in eval mode so forward passes use (and keep) running statistics."""
    for layer in bn_layers(model):
        layer.eval()


def adapt_bn_statistics(
    model: SegModel,
    target_batches: Sequence,
    cfg: BnAdaptConfig,
    objective: Callable[[torch.Tensor, nn.Module], torch.Tensor] | None = None,
) -> SegModel:
    """Re-estimate BN running statistics on target data, optionally tuning gamma/beta.

    Running means/variances follow the usual exponential moving average with
    ``cfg.momentum`` over ``cfg.passes`` sweeps. With ``train_gamma_beta`` the
    BN affine parameters alone take ``entropy_steps`` Adam steps on
    ``objective`` (self-entropy minimization by default). Everything else is
    left untouched.
    """
    cfg.validate()
    batches = list(target_batches)
    if not batches:
        raise ValueError("adapt_bn_statistics needs at least one target batch")
    layers = bn_layers(model)
    saved_momentum = [layer.momentum for layer in layers]
    was_training = model.training
    try:
        for layer in layers:
            layer.momentum = cfg.momentum
        model.train()
        with torch.no_grad():
            for _ in range(cfg.passes):
                for batch in batches:
                    x, _ = _as_batch(model, batch)
                    model(x)
        if cfg.train_gamma_beta and cfg.entropy_steps > 0:
            affine = [p for layer in layers for p in (layer.weight, layer.bias)]
            others = [p for p in model.parameters() if all(p is not q for q in affine)]
            flags = [p.requires_grad for p in others]
            for p in others:
                p.requires_grad_(False)
            optimizer = torch.optim.Adam(affine, lr=cfg.learning_rate)
            loss_fn = objective or (lambda probs, _m: self_entropy(probs, dim=1))
            try:
                for step in range(cfg.entropy_steps):
                    x, _ = _as_batch(model, batches[step % len(batches)])
                    probs = torch.softmax(model(x), dim=1)
                    loss = loss_fn(probs, model)
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
            finally:
                for p, flag in zip(others, flags):
                    p.requires_grad_(flag)
    finally:
        for layer, momentum in zip(layers, saved_momentum):
            layer.momentum = momentum
        model.train(was_training)
    return model


def parameter_distance(model: nn.Module, theta_star: ParameterSnapshot) -> float:
    with torch.no_grad():
        return float(
            sum((p - ref.to(p.dtype)).abs().sum() for (_, p), (_, ref) in zip(
                list(model.named_parameters()), theta_star.params
            ))
        )

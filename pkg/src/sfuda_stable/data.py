"""Synthetic segmentation scenes with a controllable intensity domain shift.

Scenes are gray-level images of non-overlapping ellipses and rounded squares
on a textured background; each foreground class draws its gray level from its
own intensity band. Target domains are produced by intensity-only shifts, so
masks are shared between domains.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import AugmentConfig
from .errors import ConfigError, GenerationError

SPLITS = ("source_train", "source_val", "target_train", "target_val")

# kind -> (min magnitude, max magnitude)
SHIFT_BOUNDS = {
    "identity": (0.0, float("inf")),
    "invert": (0.0, 1.0),  # blend weight toward 1 - x
    "gamma": (0.1, 10.0),  # exponent
    "contrast": (0.05, 2.0),  # gain about mid-gray 0.5
    "bias_field": (0.0, 1.0),  # peak relative amplitude of a smooth multiplicative field
    "noise": (0.0, 0.5),  # std of additive Gaussian noise
}


@dataclass
class SceneSpec:
    image_size: int = 64
    num_classes: int = 3
    shapes_per_class: tuple[int, int] = (1, 2)
    intensity_bands: tuple[tuple[float, float], ...] = ((0.10, 0.25), (0.45, 0.60), (0.75, 0.90))
    radius_range: tuple[float, float] = (5.0, 12.0)
    texture_noise: float = 0.02
    max_attempts: int = 200

    def validate(self) -> "SceneSpec":
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.intensity_bands) != self.num_classes:
            raise ConfigError("need one intensity band per class (background first)")
        for lo, hi in self.intensity_bands:
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"intensity band ({lo}, {hi}) must lie within [0, 1]")
        lo, hi = self.shapes_per_class
        if lo < 0 or hi < lo:
            raise ConfigError("shapes_per_class must be a non-negative (min, max) range")
        if self.image_size < 4:
            raise ConfigError("image_size too small")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        for key in ("shapes_per_class", "radius_range"):
            if key in data:
                data[key] = tuple(data[key])
        if "intensity_bands" in data:
            data["intensity_bands"] = tuple(tuple(b) for b in data["intensity_bands"])
        return cls(**data)


@dataclass
class DomainShiftSpec:
    kind: str = "identity"
    magnitude: float = 0.0
    seed: int = 0

    def validate(self) -> "DomainShiftSpec":
        if self.kind not in SHIFT_BOUNDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}; expected one of {sorted(SHIFT_BOUNDS)}")
        lo, hi = SHIFT_BOUNDS[self.kind]
        if not lo <= self.magnitude <= hi:
            raise ConfigError(f"{self.kind} magnitude {self.magnitude} outside [{lo}, {hi}]")
        return self


DEFAULT_SHIFT = (
    DomainShiftSpec("gamma", 2.2),
    DomainShiftSpec("contrast", 0.6),
    DomainShiftSpec("noise", 0.05),
)


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    sample_id: str = ""


def _shape_mask(size: int, rng: np.random.Generator, radius_range) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ry, rx = rng.uniform(*radius_range, size=2)
    margin = max(ry, rx) + 1
    cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
    angle = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(angle) + dy * np.sin(angle)) / rx
    v = (-dx * np.sin(angle) + dy * np.cos(angle)) / ry
    # exponent 2 gives an ellipse, 4 a rounded square
    power = 2.0 if rng.random() < 0.5 else 4.0
    return np.abs(u) ** power + np.abs(v) ** power <= 1.0


def generate_scene(spec: SceneSpec, seed: int, sample_id: str = "") -> Sample:
    spec.validate()
    rng = np.random.default_rng(seed)
    size = spec.image_size
    mask = np.zeros((size, size), dtype=np.int64)
    levels = np.full((size, size), rng.uniform(*spec.intensity_bands[0]))
    if 2 * (spec.radius_range[1] + 1) >= size and spec.shapes_per_class[1] > 0:
        raise GenerationError(f"shapes with radius up to {spec.radius_range[1]} cannot fit a {size}px canvas")
    for cls in range(1, spec.num_classes):
        count = int(rng.integers(spec.shapes_per_class[0], spec.shapes_per_class[1] + 1))
        for _ in range(count):
            for _attempt in range(spec.max_attempts):
                region = _shape_mask(size, rng, spec.radius_range)
                grown = ndimage.binary_dilation(region, iterations=2)
                if region.any() and not (mask[grown] > 0).any():
                    break
            else:
                raise GenerationError(
                    f"could not place a class-{cls} shape after {spec.max_attempts} attempts (seed {seed})"
                )
            mask[region] = cls
            levels[region] = rng.uniform(*spec.intensity_bands[cls])
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 1.0)
    texture *= spec.texture_noise / max(texture.std(), 1e-12)
    image = np.clip(levels + texture, 0.0, 1.0)
    return Sample(image=image, mask=mask, sample_id=sample_id)


def _bias_field(shape, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    a, b, c = rng.normal(size=3)
    field = a * (xx - 0.5) + b * (yy - 0.5) + c * (xx - 0.5) * (yy - 0.5)
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def apply_domain_shift(image: np.ndarray, shift) -> np.ndarray:
    """Intensity-only shift. ``shift`` is one DomainShiftSpec or a sequence applied in order."""
    if isinstance(shift, DomainShiftSpec):
        shift = [shift]
    out = np.asarray(image)
    for spec in shift:
        spec.validate()
        m = spec.magnitude
        if spec.kind == "identity":
            continue
        x = out.astype(np.float64)
        if spec.kind == "invert":
            x = (1.0 - m) * x + m * (1.0 - x)
        elif spec.kind == "gamma":
            x = np.power(x, m)
        elif spec.kind == "contrast":
            x = 0.5 + m * (x - 0.5)
        elif spec.kind == "bias_field":
            x = x * (1.0 + m * _bias_field(x.shape, np.random.default_rng(spec.seed)))
        elif spec.kind == "noise":
            x = x + np.random.default_rng(spec.seed).normal(0.0, m, x.shape)
        out = np.clip(x, 0.0, 1.0)
    return out


def shift_scale_rotate(image, mask, shift=(0.0, 0.0), scale=1.0, angle=0.0):
    """Affine warp about the image center; bilinear for the image, nearest for the mask.

    ``shift`` is (dy, dx) as a fraction of the side length, ``angle`` in degrees.
    """
    h, w = image.shape
    theta = np.deg2rad(angle)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]) * scale
    inv = np.linalg.inv(rot)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    translation = np.array([shift[0] * h, shift[1] * w])
    # output coordinate o maps to input inv @ (o - center - t) + center
    offset = center - inv @ (center + translation)
    warped = ndimage.affine_transform(image, inv, offset=offset, order=1, mode="mirror")
    warped_mask = None
    if mask is not None:
        warped_mask = ndimage.affine_transform(mask, inv, offset=offset, order=0, mode="mirror")
    return warped, warped_mask


def grid_shuffle(image, mask, grid: int, rng: np.random.Generator):
    h, w = image.shape
    if h % grid or w % grid:
        raise ValueError(f"image {h}x{w} not divisible into a {grid}x{grid} grid")
    th, tw = h // grid, w // grid
    order = rng.permutation(grid * grid)

    def shuffle(a):
        tiles = [a[r * th:(r + 1) * th, c * tw:(c + 1) * tw] for r in range(grid) for c in range(grid)]
        out = np.empty_like(a)
        for dst, src in enumerate(order):
            r, c = divmod(dst, grid)
            out[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = tiles[src]
        return out

    return shuffle(image), (shuffle(mask) if mask is not None else None)


def augment(sample: Sample, aug_config: AugmentConfig, seed) -> Sample:
    """Blur, shift-scale-rotate, brightness/contrast and grid shuffle, each with probability ``p``.

    Spatial transforms move the mask in lockstep (nearest neighbour);
    photometric ones leave it alone.
    """
    if not aug_config.any_enabled():
        return Sample(sample.image.copy(), sample.mask.copy(), sample.sample_id)
    rng = np.random.default_rng(seed)
    image = np.asarray(sample.image, dtype=np.float64)
    mask = np.asarray(sample.mask)
    cfg = aug_config
    if cfg.blur and rng.random() < cfg.p:
        image = ndimage.gaussian_filter(image, rng.uniform(*cfg.blur_sigma), mode="mirror")
    if cfg.shift_scale_rotate and rng.random() < cfg.p:
        shift = rng.uniform(-cfg.shift_limit, cfg.shift_limit, size=2)
        scale = 1.0 + rng.uniform(-cfg.scale_limit, cfg.scale_limit)
        angle = rng.uniform(-cfg.rotate_limit, cfg.rotate_limit)
        image, mask = shift_scale_rotate(image, mask, shift, scale, angle)
    if cfg.brightness_contrast and rng.random() < cfg.p:
        alpha = 1.0 + rng.uniform(-cfg.contrast_limit, cfg.contrast_limit)
        beta = rng.uniform(-cfg.brightness_limit, cfg.brightness_limit)
        image = np.clip(alpha * image + beta, 0.0, 1.0)
    if cfg.grid_shuffle and rng.random() < cfg.p:
        image, mask = grid_shuffle(image, mask, cfg.grid, rng)
    return Sample(image, mask, sample.sample_id)


@dataclass
class Split:
    images: np.ndarray  # N x H x W float32, values k/255
    masks: np.ndarray  # N x H x W int64
    ids: list[str]
    seeds: list[int]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Benchmark:
    source_train: Split
    source_val: Split
    target_train: Split
    target_val: Split
    scene_spec: SceneSpec
    target_shift: tuple[DomainShiftSpec, ...]
    master_seed: int

    @property
    def num_classes(self) -> int:
        return self.scene_spec.num_classes

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def target_train_images(self) -> np.ndarray:
        """Unlabeled target images; the only target-train view handed to adaptation."""
        return self.target_train.images

    def meta(self) -> dict:
        return {
            "format": "sfuda-dataset",
            "version": 1,
            "master_seed": self.master_seed,
            "scene_spec": asdict(self.scene_spec),
            "target_shift": [asdict(s) for s in self.target_shift],
            "num_classes": self.num_classes,
            "image_size": self.scene_spec.image_size,
            "splits": {
                name: {"ids": self.split(name).ids, "seeds": self.split(name).seeds} for name in SPLITS
            },
        }


def _quantize(image: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def make_benchmark(
    source_spec: SceneSpec | None = None,
    target_shift: Sequence[DomainShiftSpec] | DomainShiftSpec | None = None,
    n_train: int | None = None,
    n_val: int | None = None,
    seed: int = 7,
) -> Benchmark:
    """Seeded source/target train/val splits. ``n_val`` defaults to a 4:1 train:val ratio."""
    source_spec = (source_spec or SceneSpec()).validate()
    if target_shift is None:
        target_shift = DEFAULT_SHIFT
    if isinstance(target_shift, DomainShiftSpec):
        target_shift = (target_shift,)
    target_shift = tuple(s.validate() for s in target_shift)
    if n_train is None:
        n_train = 200
    if n_val is None:
        n_val = max(1, n_train // 4)
    if n_train <= 0 or n_val <= 0:
        raise ConfigError("n_train and n_val must be positive")
    sizes = {"source_train": n_train, "source_val": n_val, "target_train": n_train, "target_val": n_val}
    children = np.random.SeedSequence(seed).spawn(len(SPLITS))
    seeds = {
        name: [int(s) for s in child.generate_state(sizes[name], dtype=np.uint32)]
        for name, child in zip(SPLITS, children)
    }
    every = [s for name in SPLITS for s in seeds[name]]
    if len(set(every)) != len(every):
        raise GenerationError("sample seed collision; choose another master seed")
    splits = {}
    for name in SPLITS:
        images, masks, ids = [], [], []
        for i, s in enumerate(seeds[name]):
            sample = generate_scene(source_spec, s)
            image = sample.image
            if name.startswith("target"):
                shifted = [DomainShiftSpec(t.kind, t.magnitude, seed=(s + 1 + k) % 2**32)
                           for k, t in enumerate(target_shift)]
                image = apply_domain_shift(image, shifted)
            images.append(_quantize(image))
            masks.append(sample.mask)
            ids.append(f"{name}/{i:04d}")
        splits[name] = Split(np.stack(images), np.stack(masks), ids, seeds[name])
    return Benchmark(scene_spec=source_spec, target_shift=target_shift, master_seed=seed, **splits)


META_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "master_seed", "scene_spec", "target_shift", "num_classes",
                 "image_size", "splits", "files"],
    "properties": {
        "format": {"const": "sfuda-dataset"},
        "version": {"const": 1},
        "master_seed": {"type": "integer"},
        "num_classes": {"type": "integer", "minimum": 2},
        "image_size": {"type": "integer", "minimum": 4},
        "scene_spec": {"type": "object"},
        "target_shift": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "magnitude", "seed"],
                "properties": {
                    "kind": {"enum": sorted(SHIFT_BOUNDS)},
                    "magnitude": {"type": "number", "minimum": 0},
                    "seed": {"type": "integer"},
                },
            },
        },
        "splits": {
            "type": "object",
            "required": list(SPLITS),
            "additionalProperties": False,
            "patternProperties": {
                ".*": {
                    "type": "object",
                    "required": ["ids", "seeds", "files"],
                    "properties": {
                        "ids": {"type": "array", "items": {"type": "string"}},
                        "seeds": {"type": "array", "items": {"type": "integer"}},
                        "files": {"type": "array", "items": {"type": "string", "pattern": r"^\d{4,}\.png$"}},
                    },
                }
            },
        },
        "files": {"type": "integer", "minimum": 1},
    },
}


def save_dataset(bundle: Benchmark, directory: str | os.PathLike) -> Path:
    """Write ``images/NNNN.png``, ``masks/NNNN.png`` and ``meta.json``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    meta = bundle.meta()
    index = 0
    for name in SPLITS:
        split = bundle.split(name)
        files = []
        for image, mask in zip(split.images, split.masks):
            fname = f"{index:04d}.png"
            Image.fromarray(np.round(image * 255.0).astype(np.uint8), mode="L").save(root / "images" / fname)
            Image.fromarray(mask.astype(np.uint8), mode="L").save(root / "masks" / fname)
            files.append(fname)
            index += 1
        meta["splits"][name]["files"] = files
    meta["files"] = index
    with open(root / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return root


def load_dataset(directory: str | os.PathLike) -> Benchmark:
    import jsonschema

    root = Path(directory)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset at {root} (missing {meta_path})")
    with open(meta_path) as fh:
        meta = json.load(fh)
    try:
        jsonschema.validate(meta, META_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid dataset metadata in {meta_path}: {exc.message}") from exc
    splits = {}
    for name in SPLITS:
        entry = meta["splits"][name]
        images = [np.asarray(Image.open(root / "images" / f), dtype=np.float32) / 255.0 for f in entry["files"]]
        masks = [np.asarray(Image.open(root / "masks" / f), dtype=np.int64) for f in entry["files"]]
        splits[name] = Split(np.stack(images).astype(np.float32), np.stack(masks), list(entry["ids"]),
                             list(entry["seeds"]))
    return Benchmark(
        scene_spec=SceneSpec.from_dict(meta["scene_spec"]),
        target_shift=tuple(DomainShiftSpec(**s) for s in meta["target_shift"]),
        master_seed=meta["master_seed"],
        **splits,
    )

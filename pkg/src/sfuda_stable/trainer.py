"""Source training and pseudo-label self-training on the target domain."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import AdaptationConfig, AugmentConfig, BnAdaptConfig
from .data import Sample, Split, augment
from .errors import ConfigError, DivergenceError
from .losses import LossBreakdown, self_entropy, total_adaptation_loss, weight_consolidation_penalty, ENTROPY_SIGN
from .metrics import dataset_mean_dice, stability_report, StabilityReport
from .model import SegModel, adapt_bn_statistics, freeze_bn_statistics, parameter_distance, snapshot_parameters
from .pseudolabel import batch_pseudo_label_indices
from .snapshot import ParameterSnapshot, check_structure, save_snapshot

log = logging.getLogger(__name__)

BREAKDOWN_KEYS = ("adaptation", "self_entropy", "wc_penalty", "total")


@dataclass
class SourceConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 3e-5
    weight_decay: float = 3e-5
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> "SourceConfig":
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not (self.learning_rate >= 0 and self.weight_decay >= 0):
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SourceConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown source config keys: {sorted(unknown)}")
        if isinstance(data.get("augment"), dict):
            aug = dict(data["augment"])
            if "blur_sigma" in aug:
                aug["blur_sigma"] = tuple(aug["blur_sigma"])
            data["augment"] = AugmentConfig(**aug)
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss_breakdown: dict
    target_val_dice: float
    wall_seconds: float
    snapshot_path: str | None = None
    labeled_fraction: float = 0.0
    parameter_distance: float = 0.0

    def to_json(self) -> str:
        """Deterministic fields only; wall-clock time is written separately."""
        d = dataclasses.asdict(self)
        d.pop("wall_seconds")
        return json.dumps(d, sort_keys=True)


class AdaptationResult(NamedTuple):
    snapshots: dict[int | str, ParameterSnapshot]  # probe/final epochs plus "best"
    report: StabilityReport
    records: list[EpochRecord]


def predict(model: SegModel, images: np.ndarray, batch_size: int = 50) -> np.ndarray:
    """Eval-mode softmax probabilities, N x C x H x W."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(np.asarray(images[start:start + batch_size], dtype=np.float32))[:, None]
            out.append(torch.softmax(model(x), dim=1).numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate(model: SegModel, images: np.ndarray, masks: np.ndarray) -> float:
    probs = predict(model, images)
    return dataset_mean_dice(probs.argmax(axis=1), masks, model.descriptor.num_classes)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _augment_batch(images, masks, aug: AugmentConfig, rng: np.random.Generator):
    if not aug.any_enabled():
        return np.asarray(images, dtype=np.float32), np.asarray(masks)
    seeds = rng.integers(0, 2**32, size=len(images))
    out = [augment(Sample(img, m), aug, int(s)) for img, m, s in zip(images, masks, seeds)]
    return (np.stack([o.image for o in out]).astype(np.float32), np.stack([o.mask for o in out]))


def _one_hot_labels(indices: np.ndarray, num_classes: int, dtype) -> torch.Tensor:
    idx = torch.from_numpy(np.asarray(indices, dtype=np.int64))
    labeled = (idx >= 0).unsqueeze(1)
    onehot = F.one_hot(idx.clamp(min=0), num_classes).permute(0, 3, 1, 2)
    return (onehot * labeled).to(dtype)


def _make_optimizer(params, lr, weight_decay):
    return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)


def train_source(model: SegModel, source_train: Split, source_val: Split, config: SourceConfig | None = None):
    """Supervised cross-entropy training; returns the best-val-Dice model and its snapshot.

    ``history`` holds one dict per epoch with the mean train loss and the
    source-val mean Dice.
    """
    config = (config or SourceConfig()).validate()
    history: list[dict] = []
    if config.epochs == 0:
        return model, snapshot_parameters(model), history
    torch.manual_seed(config.seed)
    optimizer = _make_optimizer(model.parameters(), config.learning_rate, config.weight_decay)
    best_dice, best_snapshot = -math.inf, None
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        model.train()
        losses = []
        for b, idx in enumerate(_batches(len(source_train), config.batch_size, rng)):
            images, masks = _augment_batch(source_train.images[idx], source_train.masks[idx], config.augment, rng)
            logits = model(torch.from_numpy(images)[:, None])
            loss = F.cross_entropy(logits, torch.from_numpy(masks.astype(np.int64)))
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite source loss at epoch {epoch}, batch {b}", b, epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        val_dice = evaluate(model, source_val.images, source_val.masks)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": val_dice})
        log.info("source epoch %d loss %.4f val dice %.4f", epoch, history[-1]["train_loss"], val_dice)
        if val_dice > best_dice:
            best_dice, best_snapshot = val_dice, snapshot_parameters(model)
    best_snapshot.restore_into(model)
    return model, best_snapshot, history


class _RunWriter:
    def __init__(self, run_dir: str | Path | None, config: AdaptationConfig):
        self.root = Path(run_dir) if run_dir is not None else None
        if self.root is None:
            return
        (self.root / "snapshots").mkdir(parents=True, exist_ok=True)
        with open(self.root / "config.json", "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        for name in ("records.jsonl", "timings.jsonl"):
            (self.root / name).write_text("")
        self._best_only: Path | None = None

    def snapshot(self, epoch: int, snapshot: ParameterSnapshot, is_probe: bool, is_best: bool) -> str | None:
        if self.root is None or not (is_probe or is_best):
            return None
        rel = f"snapshots/epoch{epoch:03d}.snap"
        save_snapshot(snapshot, self.root / rel)
        if is_best:
            if self._best_only is not None:
                self._best_only.unlink(missing_ok=True)
            self._best_only = None if is_probe else self.root / rel
        return rel

    def record(self, record: EpochRecord) -> None:
        if self.root is None:
            return
        with open(self.root / "records.jsonl", "a") as fh:
            fh.write(record.to_json() + "\n")
        with open(self.root / "timings.jsonl", "a") as fh:
            fh.write(json.dumps({"epoch": record.epoch, "wall_seconds": record.wall_seconds}) + "\n")

    def report(self, report: StabilityReport) -> None:
        if self.root is not None:
            (self.root / "report.json").write_text(report.to_json() + "\n")


def _os_objective(config: AdaptationConfig, theta_star: ParameterSnapshot):
    sign = ENTROPY_SIGN[config.entropy_mode]

    def objective(probs, model):
        loss = sign * config.entropy_coefficient * self_entropy(probs, dim=1)
        if config.use_wc:
            loss = loss + config.wc_coefficient * weight_consolidation_penalty(model, theta_star, config.wc_normalize)
        return loss

    return objective


def self_train_adapt(
    model: SegModel,
    theta_star: ParameterSnapshot,
    target_train_images: np.ndarray,
    target_val: Split,
    config: AdaptationConfig,
    run_dir: str | Path | None = None,
    target_ids: Sequence[str] | None = None,
) -> AdaptationResult:
    """Adapt ``model`` to unlabeled target images, one EpochRecord per epoch.

    Only target images enter the optimization; ``target_val`` labels are used
    for the per-epoch Dice readout and nothing else.
    """
    config.validate()
    params = list(model.named_parameters())
    check_structure(params, theta_star)
    images = np.asarray(target_train_images, dtype=np.float32)
    if images.ndim != 3:
        raise ValueError(f"target images must be N x H x W, got shape {images.shape}")
    ids = list(target_ids) if target_ids is not None else [f"target_train/{i:04d}" for i in range(len(images))]
    num_classes = model.descriptor.num_classes
    writer = _RunWriter(run_dir, config)
    probes = set(config.probe_epochs)
    initial = evaluate(model, target_val.images, target_val.masks)
    log.info("adapt start method=%s initial target dice %.4f", config.method, initial)

    torch.manual_seed(config.seed)
    optimizer = _make_optimizer(model.parameters(), config.learning_rate, config.weight_decay)
    snapshots: dict[int | str, ParameterSnapshot] = {}
    records: list[EpochRecord] = []
    series: list[float] = []
    best = -math.inf
    dtype = next(model.parameters()).dtype

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        sums = dict.fromkeys(BREAKDOWN_KEYS, 0.0)
        labeled = 0
        steps = 0
        batches = _batches(len(images), config.batch_size, rng)

        if config.method == "os":
            bn_cfg = dataclasses.replace(config.bn, passes=config.bn.passes)
            batch_images = [images[idx] for idx in batches]
            adapt_bn_statistics(model, batch_images, bn_cfg, objective=_os_objective(config, theta_star))
            with torch.no_grad():
                for idx in batches:
                    x = torch.from_numpy(images[idx])[:, None].to(dtype)
                    model.eval()
                    probs = torch.softmax(model(x), dim=1)
                    empty = torch.zeros_like(probs)
                    bd = total_adaptation_loss(probs, empty, model, theta_star, config, dim=1)
                    for key in BREAKDOWN_KEYS:
                        sums[key] += getattr(bd, key).item()
                    steps += 1
        else:
            epoch_labels = None
            if config.pseudo_label_refresh == "per_epoch":
                probs_np = predict(model, images)
                if not np.isfinite(probs_np).all():
                    raise DivergenceError(f"non-finite predictions before epoch {epoch}", epoch=epoch)
                epoch_labels = batch_pseudo_label_indices(probs_np, config.method, config.threshold)
            for b, idx in enumerate(batches):
                log.debug("epoch %d batch %d samples %s", epoch, b, ",".join(ids[i] for i in idx))
                if epoch_labels is not None:
                    x_np, y_np = _augment_batch(images[idx], epoch_labels[idx], config.augment, rng)
                else:
                    x_np, _ = _augment_batch(images[idx], np.zeros(images[idx].shape, np.int64), config.augment, rng)
                    y_np = batch_pseudo_label_indices(predict(model, x_np), config.method, config.threshold)
                model.train()
                if not config.update_bn_stats:
                    freeze_bn_statistics(model)
                x = torch.from_numpy(x_np)[:, None].to(dtype)
                probs = torch.softmax(model(x), dim=1)
                if not torch.isfinite(probs).all():
                    raise DivergenceError(
                        f"non-finite predictions at epoch {epoch}, batch {b}", batch_index=b, epoch=epoch
                    )
                y = _one_hot_labels(y_np, num_classes, dtype)
                bd = total_adaptation_loss(probs, y, model, theta_star, config, dim=1)
                if not torch.isfinite(bd.total):
                    raise DivergenceError(
                        f"non-finite adaptation loss at epoch {epoch}, batch {b}", batch_index=b, epoch=epoch
                    )
                optimizer.zero_grad()
                bd.total.backward()
                optimizer.step()
                for key in BREAKDOWN_KEYS:
                    sums[key] += getattr(bd, key).item()
                labeled += bd.labeled_pixel_count
                steps += 1

        breakdown = {k: v / max(steps, 1) for k, v in sums.items()}
        breakdown["labeled_pixel_count"] = labeled
        breakdown.update(
            entropy_sign=ENTROPY_SIGN[config.entropy_mode],
            entropy_coefficient=config.entropy_coefficient,
            wc_coefficient=config.wc_coefficient if config.use_wc else 0.0,
        )
        val = evaluate(model, target_val.images, target_val.masks)
        series.append(val)
        is_best = val > best
        best = max(best, val)
        snap = None
        if epoch in probes or is_best or epoch == config.epochs:
            snap = snapshot_parameters(model)
            if epoch in probes or epoch == config.epochs:
                snapshots[epoch] = snap
            if is_best:
                snapshots["best"] = snap
        path = writer.snapshot(epoch, snap, epoch in probes, is_best) if snap is not None else None
        record = EpochRecord(
            epoch=epoch,
            train_loss_breakdown=breakdown,
            target_val_dice=val,
            wall_seconds=time.perf_counter() - start,
            snapshot_path=path,
            labeled_fraction=labeled / float(len(images) * images.shape[1] * images.shape[2]),
            parameter_distance=parameter_distance(model, theta_star),
        )
        records.append(record)
        writer.record(record)
        log.info("adapt epoch %d dice %.4f loss %.4f", epoch, val, breakdown["total"])

    report = stability_report(series, config.probe_epochs, initial_dice=initial)
    writer.report(report)
    return AdaptationResult(snapshots, report, records)


GROUPS = ("A", "B", "C", "D")


def group_config(group: str, method: str, base: AdaptationConfig) -> AdaptationConfig:
    """Ablation cell for one method.

    A: adaptation loss only. B: plus entropy minimization. C: plus weight
    consolidation. D: consolidation plus entropy increase (entropy
    maximization for ``os``, which has no pseudo labels to weight).
    """
    if group not in GROUPS:
        raise ConfigError(f"unknown ablation group {group!r}; expected one of {GROUPS}")
    cfg = dataclasses.replace(base, method=method, use_wc=group in "CD", use_ei=False, entropy_mode="none")
    if group == "B":
        cfg.entropy_mode = "min"
    elif group == "D":
        if method == "os":
            cfg.entropy_mode = "max"
        else:
            cfg.use_ei = True
    if method == "os" and group in "BD":
        cfg.bn = dataclasses.replace(cfg.bn, train_gamma_beta=True, entropy_steps=max(cfg.bn.entropy_steps, 1))
    return cfg.validate()


@dataclass
class AblationRow:
    label: str
    config: AdaptationConfig
    report: StabilityReport | None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.report is None


@dataclass
class AblationTable:
    rows: list[AblationRow]
    columns: tuple[int, ...] = (50, 200)

    def header(self) -> list[str]:
        return ["group", "method", "entropy", "wc", "ei"] + [f"Epoch {e}" for e in self.columns] + ["Best", "status"]

    def csv_rows(self) -> list[list[str]]:
        out = []
        for row in self.rows:
            cfg = row.config
            entropy = {"none": "-", "min": "Min", "max": "Max"}[cfg.entropy_mode]
            cells = [row.label, cfg.method, entropy, "WC" if cfg.use_wc else "-", "EI" if cfg.use_ei else "-"]
            if row.failed:
                cells += ["FAILED"] * (len(self.columns) + 1) + [f"FAILED: {row.error}"]
            else:
                series = row.report.per_epoch_dice
                cells += [f"{series[e - 1]:.4f}" if e <= len(series) else "-" for e in self.columns]
                cells += [f"{row.report.best_dice:.4f}(epoch {row.report.best_epoch})" if series else "-", "ok"]
            out.append(cells)
        return out

    def to_csv(self) -> str:
        import csv
        import io

        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        writer.writerows(self.csv_rows())
        return buf.getvalue()


def _run_cell(args):
    label, config, source, images, target_val, run_dir = args
    from .model import restore_model

    try:
        model = restore_model(source)
        result = self_train_adapt(model, source, images, target_val, config, run_dir=run_dir)
        return AblationRow(label, config, result.report)
    except Exception as exc:  # one failed cell must not sink the grid
        log.exception("ablation cell %s failed", label)
        return AblationRow(label, config, None, f"{type(exc).__name__}: {exc}")


def run_ablation_grid(
    source: ParameterSnapshot,
    target_train_images: np.ndarray,
    target_val: Split,
    grid: Sequence[tuple[str, AdaptationConfig]],
    jobs: int = 1,
    run_root: str | Path | None = None,
    columns: Sequence[int] = (50, 200),
) -> AblationTable:
    """Adapt a fresh copy of the source model once per grid cell."""
    if not grid:
        raise ConfigError("ablation grid is empty")
    tasks = []
    for label, config in grid:
        run_dir = None
        if run_root is not None:
            run_dir = Path(run_root) / f"{label}-{config.method}".replace("/", "_")
        tasks.append((label, config, source, target_train_images, target_val, run_dir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]
    return AblationTable(rows, tuple(columns))

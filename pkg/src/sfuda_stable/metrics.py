"""Dice scores and per-epoch stability summaries."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_PROBES = (1, 2, 3, 5, 10, 20, 50)


def dice(pred_mask, gt_mask, class_id: int) -> float:
    """2|P and G| / (|P| + |G|) for one class; 1.0 when the class is absent from both."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    p = pred_mask == class_id
    g = gt_mask == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def mean_dice(pred, gt, foreground_classes: Sequence[int]) -> float:
    classes = list(foreground_classes)
    if not classes:
        raise ValueError("foreground_classes must be non-empty")
    return float(np.mean([dice(pred, gt, c) for c in classes]))


def dataset_mean_dice(preds, gts, num_classes: int) -> float:
    """Per-image mean foreground Dice, averaged over images."""
    fg = range(1, num_classes)
    return float(np.mean([mean_dice(p, g, fg) for p, g in zip(preds, gts)]))


@dataclass
class StabilityReport:
    per_epoch_dice: list[float]
    best_epoch: int | None
    best_dice: float | None
    final_dice: float | None
    degradation_gap: float | None
    probe_epochs: list[int]
    probe_dice: dict[int, float] = field(default_factory=dict)
    omitted_probes: list[int] = field(default_factory=list)
    initial_dice: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["probe_dice"] = {str(k): v for k, v in self.probe_dice.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def series_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "dice"])
        for epoch, value in enumerate(self.per_epoch_dice, start=1):
            writer.writerow([epoch, f"{value:.6f}"])
        return buf.getvalue()

    def probe_row(self, label: str) -> list[str]:
        """One table row: label, Dice at each probe epoch, then best (epoch)."""
        cells = [label]
        for epoch in self.probe_epochs:
            cells.append(f"{self.probe_dice[epoch]:.4f}" if epoch in self.probe_dice else "-")
        if self.best_dice is None:
            cells.append("-")
        else:
            cells.append(f"{self.best_dice:.4f}(epoch {self.best_epoch})")
        return cells

    def probe_header(self) -> list[str]:
        return ["run"] + [f"Epoch {e}" for e in self.probe_epochs] + ["Best Performance"]


def stability_report(per_epoch_dice: Sequence[float], probe_epochs: Sequence[int] = DEFAULT_PROBES,
                     initial_dice: float | None = None) -> StabilityReport:
    """Best/final/gap statistics for a Dice series whose first entry is epoch 1.

    Ties for best resolve to the earliest epoch. Probe epochs past the end of
    the series are listed in ``omitted_probes``. An empty series yields an
    empty report.
    """
    series = [float(v) for v in per_epoch_dice]
    probes = [int(e) for e in probe_epochs]
    if not series:
        return StabilityReport([], None, None, None, None, probes, {}, list(probes), initial_dice)
    best_index = int(np.argmax(series))
    best = series[best_index]
    final = series[-1]
    probe_dice = {e: series[e - 1] for e in probes if 1 <= e <= len(series)}
    omitted = [e for e in probes if e not in probe_dice]
    return StabilityReport(
        per_epoch_dice=series,
        best_epoch=best_index + 1,
        best_dice=best,
        final_dice=final,
        degradation_gap=best - final,
        probe_epochs=probes,
        probe_dice=probe_dice,
        omitted_probes=omitted,
        initial_dice=initial_dice,
    )


def report_from_dict(data: dict) -> StabilityReport:
    data = dict(data)
    data["probe_dice"] = {int(k): v for k, v in data.get("probe_dice", {}).items()}
    return StabilityReport(**data)

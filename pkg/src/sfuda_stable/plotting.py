"""Matplotlib figures written next to the CSV/JSON run outputs."""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

RC = {
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

# background, then foreground classes; abstaining pixels are masked out
LABEL_COLORS = ["#3b4cc0", "#f28e2b", "#59a14f", "#e15759", "#b07aa1", "#76b7b2"]


@contextmanager
def _style():
    with plt.rc_context(RC):
        yield


def plot_dice_curves(series: Mapping[str, Sequence[float]], path, probes: Sequence[int] = (),
                     initial: float | None = None, title: str | None = None) -> Path:
    """Target Dice against epoch, one line per run, probe epochs marked."""
    path = Path(path)
    with _style():
        fig, ax = plt.subplots(figsize=(6, 3.6))
        for label, values in series.items():
            epochs = np.arange(1, len(values) + 1)
            (line,) = ax.plot(epochs, values, label=label, lw=1.5)
            marks = [e for e in probes if 1 <= e <= len(values)]
            if marks:
                ax.plot(marks, [values[e - 1] for e in marks], "o", ms=3.5, color=line.get_color())
        if initial is not None:
            ax.axhline(initial, color="0.4", ls="--", lw=1, label="source model")
        ax.set_xlabel("epoch")
        ax.set_ylabel("target mean Dice")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.savefig(path)
        plt.close(fig)
    return path


def _label_cmap(num_classes: int) -> ListedColormap:
    return ListedColormap(LABEL_COLORS[:num_classes])


def plot_pseudo_label_panel(image, annotation, ld_labels, dtpl_labels, path, num_classes: int) -> Path:
    """Image, annotation, LD and DTPL pseudo labels side by side (abstain is transparent)."""
    path = Path(path)
    cmap = _label_cmap(num_classes)
    panels = [("image", None), ("annotation", annotation), ("LD", ld_labels), ("DTPL", dtpl_labels)]
    with _style():
        fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
        for ax, (name, labels) in zip(axes, panels):
            ax.imshow(image, cmap="gray", vmin=0, vmax=1)
            if labels is not None:
                shown = np.ma.masked_less(np.asarray(labels), 0)
                ax.imshow(shown, cmap=cmap, vmin=0, vmax=num_classes - 1, alpha=0.55, interpolation="nearest")
            ax.set_title(name)
            ax.set_axis_off()
        fig.savefig(path)
        plt.close(fig)
    return path

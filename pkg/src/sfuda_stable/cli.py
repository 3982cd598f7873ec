"""Command-line entry point: ``sfuda-stable <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical abort.
Settings resolve as command-line flags, then ``--config`` (a flat YAML
``key: value`` file using the flag names with dashes or underscores), then
built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import AdaptationConfig, AugmentConfig, BnAdaptConfig, ThresholdConfig
from .errors import ConfigError, DivergenceError, GenerationError

log = logging.getLogger("sfuda_stable")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
HOME_ENV = "SFUDA_STABLE_HOME"


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    output_dir: str
    master_seed: int
    tool_version: str = __version__
    argv: list | None = None
    status: str = "started"

    def write(self, directory: Path) -> None:
        tmp = directory / "manifest.json.tmp"
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, directory / "manifest.json")


def _parse_list(text: str, cast=int) -> list:
    return [cast(t) for t in str(text).split(",") if str(t).strip()]


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain key: value pairs")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Flags > config file > defaults."""
    file_values = _load_config_file(getattr(args, "config", None))
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in config file: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(file_values)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _prepare_output(out: str | None, command: str, seed: int, force: bool) -> Path:
    if out is None:
        root = Path(os.environ.get(HOME_ENV, "runs"))
        out = root / f"{command}-seed{seed}"
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"output directory {path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _start(args, command: str, seed: int) -> tuple[Path, RunManifest]:
    out = _prepare_output(args.out, command, seed, args.force)
    manifest = RunManifest(command, getattr(args, "config", None), str(out), seed, argv=sys.argv[1:])
    manifest.write(out)
    return out, manifest


def _finish(out: Path, manifest: RunManifest, status: str = "completed") -> None:
    manifest.status = status
    manifest.write(out)


def _augment_config(enabled: bool) -> AugmentConfig:
    return AugmentConfig() if enabled else AugmentConfig.disabled()


# ---------------------------------------------------------------- gen-data

GEN_DEFAULTS = {"preset": "default", "seed": 7, "n_train": 200, "n_val": None, "split": "4:1", "shift": None,
                "image_size": 64}


def _parse_shift(items) -> list:
    from .data import DomainShiftSpec

    shifts = []
    for item in items:
        kind, _, magnitude = str(item).partition(":")
        shifts.append(DomainShiftSpec(kind, float(magnitude or 0.0)).validate())
    return shifts


def cmd_gen_data(args) -> int:
    from .data import DEFAULT_SHIFT, SceneSpec, make_benchmark, save_dataset

    cfg = _resolve(args, GEN_DEFAULTS)
    if cfg["preset"] != "default":
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    train_part, _, val_part = str(cfg["split"]).partition(":")
    try:
        ratio = float(train_part) / float(val_part)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"--split must look like 4:1, got {cfg['split']!r}") from exc
    n_train = int(cfg["n_train"])
    n_val = int(cfg["n_val"]) if cfg["n_val"] is not None else max(1, round(n_train / ratio))
    shift = _parse_shift(cfg["shift"]) if cfg["shift"] else list(DEFAULT_SHIFT)
    seed = int(cfg["seed"])
    out, manifest = _start(args, "gen-data", seed)
    bundle = make_benchmark(SceneSpec(image_size=int(cfg["image_size"])), shift, n_train, n_val, seed)
    save_dataset(bundle, out)
    _finish(out, manifest)
    kinds = "+".join(f"{s.kind}({s.magnitude:g})" for s in shift)
    print(f"wrote {out}: source {n_train}/{n_val}, target {n_train}/{n_val} (train/val), shift {kinds}")
    return EXIT_OK


# ----------------------------------------------------------- train-source

SOURCE_DEFAULTS = {"data": None, "epochs": 30, "batch_size": 4, "lr": 3e-5, "weight_decay": 3e-5, "seed": 7,
                   "augment": True, "channels": "16,32,64"}


def cmd_train_source(args) -> int:
    import torch

    from .data import load_dataset
    from .model import ModelDescriptor, build_model
    from .snapshot import save_snapshot
    from .trainer import SourceConfig, evaluate, train_source

    cfg = _resolve(args, SOURCE_DEFAULTS)
    if not cfg["data"]:
        raise ConfigError("--data is required")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    bundle = load_dataset(cfg["data"])
    seed = int(cfg["seed"])
    out, manifest = _start(args, "train-source", seed)
    source_cfg = SourceConfig(
        epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), learning_rate=float(cfg["lr"]),
        weight_decay=float(cfg["weight_decay"]), seed=seed, augment=_augment_config(bool(cfg["augment"])),
    ).validate()
    descriptor = ModelDescriptor(tuple(_parse_list(cfg["channels"])), bundle.num_classes).validate()
    (out / "config.json").write_text(json.dumps(
        {"source": source_cfg.to_dict(), "model": descriptor.to_dict(), "data": str(cfg["data"])},
        indent=2, sort_keys=True) + "\n")
    model = build_model(descriptor, seed=seed)
    model, snapshot, history = train_source(model, bundle.source_train, bundle.source_val, source_cfg)
    save_snapshot(snapshot, out / "source.snap")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_dice"])
    for row in history:
        writer.writerow([row["epoch"], f"{row['train_loss']:.8f}", f"{row['val_dice']:.8f}"])
    (out / "history.csv").write_text(buf.getvalue())
    target = evaluate(model, bundle.target_val.images, bundle.target_val.masks)
    source = evaluate(model, bundle.source_val.images, bundle.source_val.masks)
    (out / "summary.json").write_text(json.dumps({"source_val_dice": source, "target_val_dice": target},
                                                 indent=2) + "\n")
    _finish(out, manifest)
    print(f"source-val dice {source:.4f}, target-val dice {target:.4f}; snapshot {out / 'source.snap'}")
    return EXIT_OK


# ------------------------------------------------------------------ adapt

ADAPT_DEFAULTS = {
    "data": None, "snapshot": None, "method": "fairld", "wc": False, "wc_coef": 1.0, "wc_normalize": False,
    "ei": False, "entropy": "none", "entropy_coef": 1.0, "alpha": 0.3, "lam": 0.2, "epochs": 50,
    "batch_size": 4, "lr": 3e-5, "weight_decay": 3e-5, "seed": 7, "probe": "1,2,3,5,10,20,50",
    "refresh": "per_epoch", "augment": True, "update_bn_stats": False, "bn_momentum": 0.1,
    "entropy_steps": 0, "plot": False,
}


def _adaptation_config(cfg: dict) -> AdaptationConfig:
    method = cfg["method"]
    bn = BnAdaptConfig(momentum=float(cfg["bn_momentum"]), train_gamma_beta=int(cfg["entropy_steps"]) > 0,
                       entropy_steps=int(cfg["entropy_steps"]), learning_rate=float(cfg["lr"]))
    return AdaptationConfig(
        method=method, use_wc=bool(cfg["wc"]), wc_coefficient=float(cfg["wc_coef"]),
        wc_normalize=bool(cfg["wc_normalize"]), use_ei=bool(cfg["ei"]), entropy_mode=cfg["entropy"],
        entropy_coefficient=float(cfg["entropy_coef"]),
        threshold=ThresholdConfig(float(cfg["alpha"]), float(cfg["lam"])), epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]), learning_rate=float(cfg["lr"]),
        weight_decay=float(cfg["weight_decay"]), seed=int(cfg["seed"]), pseudo_label_refresh=cfg["refresh"],
        augment=_augment_config(bool(cfg["augment"])), update_bn_stats=bool(cfg["update_bn_stats"]), bn=bn,
        probe_epochs=tuple(_parse_list(cfg["probe"])),
    ).validate()


def _load_inputs(cfg: dict):
    from .data import load_dataset
    from .model import restore_model
    from .snapshot import load_snapshot

    for key in ("data", "snapshot"):
        if not cfg[key]:
            raise ConfigError(f"--{key} is required")
    if not Path(cfg["snapshot"]).exists():
        raise FileNotFoundError(f"snapshot not found: {cfg['snapshot']}")
    bundle = load_dataset(cfg["data"])
    source = load_snapshot(cfg["snapshot"])
    return bundle, source, restore_model(source)


def probe_table_csv(report, label: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(report.probe_header())
    source_row = ["Source Model", f"{report.initial_dice:.4f}" if report.initial_dice is not None else "-"]
    source_row += ["-"] * (len(report.probe_epochs) - 1) + ["-"]
    writer.writerow(source_row)
    writer.writerow(report.probe_row(label))
    return buf.getvalue()


def run_label(config: AdaptationConfig) -> str:
    parts = [config.method]
    if config.use_wc:
        parts.append("WC")
    if config.use_ei:
        parts.append("EI")
    if config.entropy_mode != "none":
        parts.append(config.entropy_mode.capitalize())
    return "+".join(parts)


def cmd_adapt(args) -> int:
    from .trainer import self_train_adapt

    cfg = _resolve(args, ADAPT_DEFAULTS)
    config = _adaptation_config(cfg)
    bundle, source, model = _load_inputs(cfg)
    out, manifest = _start(args, "adapt", config.seed)
    try:
        result = self_train_adapt(model, source, bundle.target_train_images(), bundle.target_val, config,
                                  run_dir=out, target_ids=bundle.target_train.ids)
    except DivergenceError:
        _finish(out, manifest, "aborted")
        raise
    label = run_label(config)
    (out / "probe_table.csv").write_text(probe_table_csv(result.report, label))
    (out / "series.csv").write_text(result.report.series_csv())
    if cfg["plot"]:
        from .plotting import plot_dice_curves

        plot_dice_curves({label: result.report.per_epoch_dice}, out / "dice_curve.png",
                         result.report.probe_epochs, result.report.initial_dice)
    _finish(out, manifest)
    r = result.report
    if r.per_epoch_dice:
        print(f"{label}: best {r.best_dice:.4f} (epoch {r.best_epoch}), final {r.final_dice:.4f}, "
              f"gap {r.degradation_gap:.4f}")
    else:
        print(f"{label}: no epochs run")
    return EXIT_OK


# --------------------------------------------------------------- ablation

ABLATION_DEFAULTS = dict(ADAPT_DEFAULTS, groups="A,B,C,D", methods="fairld", columns="50,200", jobs=1)


def cmd_ablation(args) -> int:
    from .trainer import group_config, run_ablation_grid

    cfg = _resolve(args, ABLATION_DEFAULTS)
    base = _adaptation_config(dict(cfg, wc=False, ei=False, entropy="none"))
    grid = [(g, group_config(g, method, base))
            for method in _parse_list(cfg["methods"], str) for g in _parse_list(cfg["groups"], str)]
    bundle, source, _ = _load_inputs(cfg)
    out, manifest = _start(args, "ablation", base.seed)
    table = run_ablation_grid(source, bundle.target_train_images(), bundle.target_val, grid,
                              jobs=int(cfg["jobs"]), run_root=out / "runs",
                              columns=_parse_list(cfg["columns"]))
    (out / "ablation.csv").write_text(table.to_csv())
    if cfg["plot"]:
        from .plotting import plot_dice_curves

        curves = {f"{r.label} {run_label(r.config)}": r.report.per_epoch_dice for r in table.rows if not r.failed}
        if curves:
            plot_dice_curves(curves, out / "ablation_curves.png", table.columns)
    failed = sum(r.failed for r in table.rows)
    _finish(out, manifest, "completed" if failed < len(table.rows) else "failed")
    print(table.to_csv(), end="")
    if failed == len(table.rows):
        return EXIT_NUMERIC
    return EXIT_OK


# --------------------------------------------------------------- evaluate

EVAL_DEFAULTS = {"data": None, "snapshot": None, "split": "target_val"}


def cmd_evaluate(args) -> int:
    from .trainer import evaluate

    cfg = _resolve(args, EVAL_DEFAULTS)
    bundle, _, model = _load_inputs(cfg)
    split = bundle.split(cfg["split"])
    score = evaluate(model, split.images, split.masks)
    print(json.dumps({"split": cfg["split"], "mean_dice": score}))
    return EXIT_OK


# ---------------------------------------------------------- pseudo-labels

PL_DEFAULTS = {"data": None, "snapshot": None, "alpha": 0.3, "lam": 0.2, "count": 4, "split": "target_train",
               "seed": 7}


def cmd_pseudo_labels(args) -> int:
    from .plotting import plot_pseudo_label_panel
    from .pseudolabel import batch_pseudo_label_indices
    from .trainer import predict

    cfg = _resolve(args, PL_DEFAULTS)
    bundle, _, model = _load_inputs(cfg)
    threshold = ThresholdConfig(float(cfg["alpha"]), float(cfg["lam"])).validate()
    out, manifest = _start(args, "pseudo-labels", int(cfg["seed"]))
    split = bundle.split(cfg["split"])
    count = min(int(cfg["count"]), len(split))
    probs = predict(model, split.images[:count])
    ld = batch_pseudo_label_indices(probs, "ld", threshold)
    dtpl = batch_pseudo_label_indices(probs, "fairld", threshold)
    rows = []
    for i in range(count):
        plot_pseudo_label_panel(split.images[i], split.masks[i], ld[i], dtpl[i], out / f"overlay_{i:04d}.png",
                                bundle.num_classes)
        for name, labels in (("ld", ld[i]), ("dtpl", dtpl[i])):
            labeled = labels >= 0
            correct = float((labels[labeled] == split.masks[i][labeled]).mean()) if labeled.any() else float("nan")
            rows.append({"id": split.ids[i], "labeler": name, "labeled_fraction": float(labeled.mean()),
                         "label_accuracy": correct})
    (out / "coverage.json").write_text(json.dumps(rows, indent=2) + "\n")
    _finish(out, manifest)
    print(f"wrote {count} overlays to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_common(p: argparse.ArgumentParser, with_out: bool = True) -> None:
    p.add_argument("--config", help="YAML key: value file; flags override it")
    if with_out:
        p.add_argument("--out", help=f"output directory (default ${HOME_ENV}/<command>-seed<seed>)")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")


def _add_adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--snapshot", help="source model snapshot (.snap)")
    p.add_argument("--method", choices=["fairld", "ld", "os"])
    p.add_argument("--wc", action="store_true", default=None, help="weight consolidation")
    p.add_argument("--wc-coef", dest="wc_coef", type=float)
    p.add_argument("--wc-normalize", dest="wc_normalize", action="store_true", default=None,
                   help="divide the L1 anchor by the parameter count")
    p.add_argument("--ei", action="store_true", default=None, help="entropy increase adaptation loss")
    p.add_argument("--entropy", choices=["none", "min", "max"])
    p.add_argument("--entropy-coef", dest="entropy_coef", type=float)
    p.add_argument("--alpha", type=float, help="top fraction per class for the intra-class threshold")
    p.add_argument("--lambda", dest="lam", type=float, help="global probability floor")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--probe", help="comma-separated probe epochs")
    p.add_argument("--refresh", choices=["per_batch", "per_epoch"])
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    p.add_argument("--update-bn-stats", dest="update_bn_stats", action="store_true", default=None)
    p.add_argument("--bn-momentum", dest="bn_momentum", type=float)
    p.add_argument("--entropy-steps", dest="entropy_steps", type=int,
                   help="gamma/beta entropy steps per epoch for --method os")
    p.add_argument("--plot", action="store_true", default=None, help="write a Dice-vs-epoch figure")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfuda-stable", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic source/target benchmark")
    _add_common(p)
    p.add_argument("--preset", choices=["default"])
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--split", help="train:val ratio used when --n-val is absent (default 4:1)")
    p.add_argument("--shift", action="append", help="kind:magnitude, repeatable (default gamma:2.2 "
                                                     "contrast:0.6 noise:0.05)")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="supervised training on the source splits")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--channels", help="encoder widths, e.g. 16,32,64")
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="self-train a source snapshot on unlabeled target images")
    _add_common(p)
    _add_adapt_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("ablation", help="run the A-D ablation groups")
    _add_common(p)
    _add_adapt_flags(p)
    p.add_argument("--groups", help="comma-separated subset of A,B,C,D")
    p.add_argument("--methods", help="comma-separated methods, e.g. fairld,os")
    p.add_argument("--columns", help="epochs reported as table columns (default 50,200)")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("evaluate", help="mean Dice of a snapshot on one split")
    _add_common(p, with_out=False)
    p.add_argument("--data")
    p.add_argument("--snapshot")
    p.add_argument("--split", choices=["source_train", "source_val", "target_train", "target_val"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pseudo-labels", help="render LD vs DTPL pseudo-label overlays")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--snapshot")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--count", type=int)
    p.add_argument("--split", choices=["source_train", "source_val", "target_train", "target_val"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pseudo_labels)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, GenerationError) as exc:  # ConfigError and malformed inputs
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

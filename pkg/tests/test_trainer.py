"""Fast trainer checks on a miniature benchmark; the full-size runs live in test_acceptance."""

import dataclasses
import json
import logging

import numpy as np
import pytest
import torch

from sfuda_stable.config import AdaptationConfig, AugmentConfig
from sfuda_stable.data import make_benchmark
from sfuda_stable.errors import ConfigError, DivergenceError
from sfuda_stable.model import ModelDescriptor, build_model, snapshot_parameters
from sfuda_stable.snapshot import load_snapshot
from sfuda_stable.trainer import (
    SourceConfig,
    group_config,
    run_ablation_grid,
    self_train_adapt,
    train_source,
)

DESC = ModelDescriptor(channels=(4, 8), num_classes=3)


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(n_train=8, n_val=4, seed=5)


@pytest.fixture(scope="module")
def source(bench):
    model = build_model(DESC, seed=1)
    model, snap, history = train_source(model, bench.source_train, bench.source_val,
                                        SourceConfig(epochs=2, learning_rate=1e-2, seed=1))
    return snap


def fresh(snap):
    return snap.restore_into(build_model(DESC))


def cfg(**kw):
    base = dict(epochs=3, seed=2, learning_rate=1e-3, probe_epochs=(1, 2, 3), augment=AugmentConfig(p=0.5))
    base.update(kw)
    return AdaptationConfig(**base)


class TestSource:
    def test_zero_epochs(self, bench):
        model = build_model(DESC, seed=3)
        before = snapshot_parameters(model)
        model2, snap, history = train_source(model, bench.source_train, bench.source_val, SourceConfig(epochs=0))
        assert history == [] and snap.equals(before) and snapshot_parameters(model2).equals(before)

    def test_deterministic(self, bench):
        runs = []
        for _ in range(2):
            model = build_model(DESC, seed=3)
            runs.append(train_source(model, bench.source_train, bench.source_val,
                                     SourceConfig(epochs=2, learning_rate=1e-3, seed=4))[2])
        assert runs[0] == runs[1]

    def test_returns_best_checkpoint(self, bench):
        model = build_model(DESC, seed=3)
        model, snap, history = train_source(model, bench.source_train, bench.source_val,
                                            SourceConfig(epochs=3, learning_rate=1e-2, seed=4))
        assert snapshot_parameters(model).equals(snap)
        from sfuda_stable.trainer import evaluate
        best = max(h["val_dice"] for h in history)
        assert evaluate(model, bench.source_val.images, bench.source_val.masks) == pytest.approx(best)


class TestAdapt:
    def test_zero_epochs(self, bench, source):
        model = fresh(source)
        result = self_train_adapt(model, source, bench.target_train_images(), bench.target_val, cfg(epochs=0))
        assert result.records == [] and result.report.per_epoch_dice == []
        assert snapshot_parameters(model).equals(source)

    def test_structure_mismatch(self, bench, source):
        other = build_model(ModelDescriptor(channels=(4, 6), num_classes=3))
        with pytest.raises(ValueError, match="shape"):
            self_train_adapt(other, source, bench.target_train_images(), bench.target_val, cfg())

    @pytest.mark.parametrize("kw", [
        dict(method="fairld", use_wc=True, use_ei=True, wc_coefficient=0.01),
        dict(method="ld", entropy_mode="min"),
        dict(method="fairld", pseudo_label_refresh="per_batch", entropy_mode="max", use_wc=True),
        dict(method="fairld", use_ei=True, entropy_mode="max", update_bn_stats=True),
    ])
    def test_breakdown_invariant(self, bench, source, kw):
        result = self_train_adapt(fresh(source), source, bench.target_train_images(), bench.target_val, cfg(**kw))
        assert [r.epoch for r in result.records] == [1, 2, 3]
        for r in result.records:
            b = r.train_loss_breakdown
            recomposed = b["adaptation"] + b["entropy_sign"] * b["entropy_coefficient"] * b["self_entropy"] \
                + b["wc_coefficient"] * b["wc_penalty"]
            assert abs(b["total"] - recomposed) < 1e-6
            assert b["wc_penalty"] >= 0
            assert 0 < r.labeled_fraction <= 1
        rep = result.report
        assert rep.best_dice == max(rep.per_epoch_dice)
        assert rep.degradation_gap == pytest.approx(rep.best_dice - rep.final_dice)

    def test_os_method(self, bench, source):
        model = fresh(source)
        c = cfg(method="os", entropy_mode="min")
        c.bn = dataclasses.replace(c.bn, train_gamma_beta=True, entropy_steps=2, learning_rate=1e-2)
        result = self_train_adapt(model, source, bench.target_train_images(), bench.target_val, c)
        after = dict(model.named_parameters())
        changed = {n for n, t in source.params if not torch.equal(after[n], t)}
        assert changed and all(".1." in n for n in changed)  # only BN affine parameters move
        assert len(result.records) == 3

    def test_os_without_gamma_beta_keeps_weights(self, bench, source):
        model = fresh(source)
        self_train_adapt(model, source, bench.target_train_images(), bench.target_val, cfg(method="os"))
        assert snapshot_parameters(model).params and all(
            torch.equal(a, b) for (_, a), (_, b) in zip(snapshot_parameters(model).params, source.params))
        buffers = dict(model.named_buffers())
        assert any(not torch.equal(buffers[n], t) for n, t in source.buffers)

    def test_deterministic_records(self, bench, source, tmp_path):
        c = cfg(use_wc=True, use_ei=True, wc_coefficient=0.01)
        for name in ("a", "b"):
            self_train_adapt(fresh(source), source, bench.target_train_images(), bench.target_val, c,
                             run_dir=tmp_path / name)
        assert (tmp_path / "a" / "records.jsonl").read_bytes() == (tmp_path / "b" / "records.jsonl").read_bytes()

    def test_run_directory(self, bench, source, tmp_path):
        result = self_train_adapt(fresh(source), source, bench.target_train_images(), bench.target_val,
                                  cfg(probe_epochs=(1, 3)), run_dir=tmp_path)
        assert json.loads((tmp_path / "config.json").read_text())["epochs"] == 3
        lines = (tmp_path / "records.jsonl").read_text().splitlines()
        assert [json.loads(l)["epoch"] for l in lines] == [1, 2, 3]
        assert "wall_seconds" not in lines[0]
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["per_epoch_dice"] == result.report.per_epoch_dice
        for epoch in (1, 3):
            snap = load_snapshot(tmp_path / "snapshots" / f"epoch{epoch:03d}.snap")
            assert snap.names == source.names
        best_path = result.records[result.report.best_epoch - 1].snapshot_path
        assert best_path and (tmp_path / best_path).exists()

    def test_source_free_logs(self, bench, source, caplog):
        """Only target-train identifiers reach the adaptation batches."""
        with caplog.at_level(logging.DEBUG, logger="sfuda_stable.trainer"):
            self_train_adapt(fresh(source), source, bench.target_train_images(), bench.target_val, cfg(epochs=1),
                             target_ids=bench.target_train.ids)
        text = caplog.text
        assert "target_train/0000" in text
        assert "source_" not in text

    def test_divergence(self, bench, source):
        model = fresh(source)
        with torch.no_grad():
            model.head.bias.fill_(float("nan"))
        with pytest.raises(DivergenceError):
            self_train_adapt(model, source, bench.target_train_images(), bench.target_val, cfg(epochs=1))

    def test_rejects_contradiction(self, bench, source):
        with pytest.raises(ConfigError):
            self_train_adapt(fresh(source), source, bench.target_train_images(), bench.target_val,
                             cfg(use_ei=True, entropy_mode="min"))

    def test_large_wc_anchors(self, bench, source):
        model = fresh(source)
        result = self_train_adapt(model, source, bench.target_train_images(), bench.target_val,
                                  cfg(use_wc=True, wc_coefficient=1e6))
        free = self_train_adapt(fresh(source), source, bench.target_train_images(), bench.target_val, cfg())
        assert result.records[-1].parameter_distance < free.records[-1].parameter_distance


class TestAblation:
    def test_groups(self):
        base = AdaptationConfig()
        a, b, c, d = (group_config(g, "fairld", base) for g in "ABCD")
        assert (a.use_wc, a.use_ei, a.entropy_mode) == (False, False, "none")
        assert (b.use_wc, b.entropy_mode) == (False, "min")
        assert (c.use_wc, c.use_ei, c.entropy_mode) == (True, False, "none")
        assert (d.use_wc, d.use_ei) == (True, True)
        od = group_config("D", "os", base)
        assert od.entropy_mode == "max" and od.bn.train_gamma_beta
        with pytest.raises(ConfigError):
            group_config("E", "fairld", base)

    def test_grid_end_to_end(self, bench, source, tmp_path):
        base = cfg(epochs=2)
        grid = [(g, group_config(g, "fairld", base)) for g in "ABCD"]
        grid.append(("A", group_config("A", "fairld", base)))
        table = run_ablation_grid(source, bench.target_train_images(), bench.target_val, grid,
                                  run_root=tmp_path, columns=(1, 2, 50))
        assert len(table.rows) == 5 and not any(r.failed for r in table.rows)
        assert table.rows[0].report == table.rows[4].report
        lines = table.to_csv().splitlines()
        assert lines[0].split(",") == ["group", "method", "entropy", "wc", "ei", "Epoch 1", "Epoch 2", "Epoch 50",
                                       "Best", "status"]
        assert len(lines) == 6
        assert lines[1].split(",")[7] == "-"

    def test_failed_cell_recorded(self, bench, source):
        bad = cfg(epochs=1)
        bad.threshold.alpha = 5.0
        table = run_ablation_grid(source, bench.target_train_images(), bench.target_val,
                                  [("A", bad), ("B", cfg(epochs=1))])
        assert table.rows[0].failed and not table.rows[1].failed
        assert "FAILED" in table.to_csv().splitlines()[1]

    def test_empty_grid(self, bench, source):
        with pytest.raises(ConfigError):
            run_ablation_grid(source, bench.target_train_images(), bench.target_val, [])

import copy

import numpy as np
import pytest
import torch

from sfuda_stable.config import AdaptationConfig, BnAdaptConfig
from sfuda_stable.errors import ConfigError
from sfuda_stable.losses import total_adaptation_loss, weight_consolidation_penalty
from sfuda_stable.model import (
    ModelDescriptor,
    adapt_bn_statistics,
    bn_layers,
    build_model,
    forward_softmax,
    restore_model,
    snapshot_parameters,
)
from sfuda_stable.snapshot import load_snapshot, save_snapshot


def params_of(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


class TestBuild:
    def test_deterministic(self):
        a, b = build_model(seed=3), build_model(seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)
        c = build_model(seed=4)
        assert not torch.equal(next(a.parameters()), next(c.parameters()))

    def test_output_shape(self):
        m = build_model(ModelDescriptor(num_classes=2))
        probs = forward_softmax(m, torch.rand(32, 32))
        assert probs.shape == (32, 32, 2)

    def test_parameter_count(self):
        # conv(1->16) 144 + bn 32; conv(16->32) 4608 + 64; conv(32->64) 18432 + 128;
        # dec conv(96->32) 27648 + 64; dec conv(48->16) 6912 + 32; head 16*3 + 3
        expected = 176 + 4672 + 18560 + 27712 + 6944 + 51
        m = build_model()
        assert sum(p.numel() for p in m.parameters()) == expected == m.descriptor.parameter_count()

    @pytest.mark.parametrize("desc", [ModelDescriptor(channels=(8,)), ModelDescriptor(num_classes=1)])
    def test_invalid(self, desc):
        with pytest.raises(ConfigError):
            build_model(desc)

    def test_names_stable(self):
        names = [n for n, _ in build_model().named_parameters()]
        assert names == [n for n, _ in build_model(seed=9).named_parameters()]
        assert names[0] == "encoders.0.0.weight" and names[-1] == "head.bias"


class TestForward:
    def test_normalized(self):
        m = build_model(seed=1)
        probs = forward_softmax(m, torch.rand(3, 16, 16), train=True)
        assert torch.allclose(probs.sum(dim=1), torch.ones(3, 16, 16), atol=1e-5)

    def test_zero_head_is_uniform(self):
        m = build_model(ModelDescriptor(num_classes=4))
        with torch.no_grad():
            m.head.weight.zero_()
            m.head.bias.zero_()
        probs = forward_softmax(m, torch.rand(8, 8))
        assert torch.allclose(probs, torch.full_like(probs, 0.25))

    def test_eval_independent_of_batch(self):
        m = build_model(seed=2)
        images = torch.rand(4, 16, 16)
        batched = forward_softmax(m, images)
        single = forward_softmax(m, images[2])
        assert torch.allclose(batched[2].permute(1, 2, 0), single, atol=1e-6)

    def test_bad_shape(self):
        m = build_model()
        with pytest.raises(ValueError):
            forward_softmax(m, torch.rand(2, 2, 15, 15))
        with pytest.raises(ValueError):
            forward_softmax(m, torch.rand(30, 30))

    def test_deterministic_eval(self):
        m = build_model(seed=5)
        x = torch.rand(2, 16, 16)
        assert torch.equal(forward_softmax(m, x), forward_softmax(m, x))


class TestSnapshot:
    def test_isolation(self):
        m = build_model(seed=1)
        snap = snapshot_parameters(m)
        before = [t.clone() for _, t in snap.params]
        opt = torch.optim.SGD(m.parameters(), lr=0.1)
        forward_softmax(m, torch.rand(2, 16, 16), train=True)[:, 0].mean().backward()
        opt.step()
        assert weight_consolidation_penalty(m, snap).item() > 0
        assert all(torch.equal(a, b) for a, (_, b) in zip(before, snap.params))

    def test_restore_round_trip(self):
        m = build_model(seed=1)
        with torch.no_grad():
            forward_softmax(m, torch.rand(4, 16, 16), train=True)  # moves running stats
        snap = snapshot_parameters(m)
        restored = restore_model(snap)
        assert weight_consolidation_penalty(restored, snap).item() == 0.0
        x = torch.rand(3, 16, 16)
        assert torch.equal(forward_softmax(m, x), forward_softmax(restored, x))

    def test_file_round_trip(self, tmp_path):
        m = build_model(seed=8)
        snap = snapshot_parameters(m)
        save_snapshot(snap, tmp_path / "a.snap")
        loaded = load_snapshot(tmp_path / "a.snap")
        assert loaded.equals(snap)
        assert loaded.meta == m.descriptor.to_dict()
        assert (tmp_path / "a.snap").read_bytes().startswith(b"SFUDA-SNAP v1\n")

    def test_file_checksum_detects_corruption(self, tmp_path):
        path = tmp_path / "a.snap"
        save_snapshot(snapshot_parameters(build_model()), path)
        raw = bytearray(path.read_bytes())
        raw[-100] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum"):
            load_snapshot(path)

    def test_bad_header(self, tmp_path):
        (tmp_path / "x.snap").write_bytes(b"nope\n")
        with pytest.raises(ValueError, match="header"):
            load_snapshot(tmp_path / "x.snap")


def _bn_inputs(model, batch):
    captured = []
    hooks = [layer.register_forward_hook(lambda mod, inp, out: captured.append(inp[0].detach()))
             for layer in bn_layers(model)]
    model.train()
    with torch.no_grad():
        model(batch[:, None])
    for h in hooks:
        h.remove()
    return captured


class TestBnAdaptation:
    def test_momentum_one_overwrites(self):
        m = build_model(seed=3)
        batch = torch.rand(4, 16, 16)
        inputs = _bn_inputs(build_model(seed=3), batch)
        conv_before = params_of(m)
        adapt_bn_statistics(m, [batch], BnAdaptConfig(momentum=1.0, passes=1))
        for layer, x in zip(bn_layers(m), inputs):
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=True)
            assert torch.allclose(layer.running_mean, mean, atol=1e-6)
            assert torch.allclose(layer.running_var, var, atol=1e-6)
        for name, value in params_of(m).items():
            assert torch.equal(value, conv_before[name])

    def test_momentum_restored(self):
        m = build_model()
        adapt_bn_statistics(m, [torch.rand(2, 16, 16)], BnAdaptConfig(momentum=0.7))
        assert all(layer.momentum == 0.1 for layer in bn_layers(m))

    def test_two_pass_ema(self):
        m = build_model(seed=4)
        batch = torch.rand(4, 16, 16)
        r0 = [(l.running_mean.clone(), l.running_var.clone()) for l in bn_layers(m)]
        inputs = _bn_inputs(build_model(seed=4), batch)
        adapt_bn_statistics(m, [batch], BnAdaptConfig(momentum=0.5, passes=2))
        for layer, (mean0, var0), x in zip(bn_layers(m), r0, inputs):
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=True)
            # r2 = 0.25 r0 + 0.75 b
            assert torch.allclose(layer.running_mean, 0.25 * mean0 + 0.75 * mean, atol=1e-6)
            assert torch.allclose(layer.running_var, 0.25 * var0 + 0.75 * var, atol=1e-5)

    def test_gamma_beta_training_touches_only_affine(self):
        m = build_model(seed=6)
        before = params_of(m)
        cfg = BnAdaptConfig(momentum=0.1, train_gamma_beta=True, entropy_steps=3, learning_rate=1e-2)
        adapt_bn_statistics(m, [torch.rand(2, 16, 16), torch.rand(2, 16, 16)], cfg)
        affine = {f"{n}.{k}" for n, mod in m.named_modules() if isinstance(mod, torch.nn.BatchNorm2d)
                  for k in ("weight", "bias")}
        changed = {n for n, v in params_of(m).items() if not torch.equal(v, before[n])}
        assert changed and changed <= affine
        assert all(p.requires_grad for p in m.parameters())

    def test_frozen_gamma_beta(self):
        m = build_model(seed=6)
        before = params_of(m)
        adapt_bn_statistics(m, [torch.rand(2, 16, 16)], BnAdaptConfig(train_gamma_beta=False, entropy_steps=5))
        assert all(torch.equal(v, before[n]) for n, v in params_of(m).items())

    def test_empty(self):
        with pytest.raises(ValueError):
            adapt_bn_statistics(build_model(), [], BnAdaptConfig())


def _micro_problem(seed):
    torch.manual_seed(seed)
    desc = ModelDescriptor(channels=(2, 3), num_classes=2)
    m = build_model(desc, seed=11).double()
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.1 * torch.randn_like(p))
    star = snapshot_parameters(build_model(desc, seed=11).double())
    x = torch.rand(2, 4, 4, dtype=torch.float64)
    labels = torch.as_tensor(np.random.default_rng(seed).integers(-1, 2, size=(2, 4, 4)))
    y = torch.nn.functional.one_hot(labels.clamp(min=0), 2).permute(0, 3, 1, 2).double()
    y = y * (labels >= 0)[:, None]
    cfg = AdaptationConfig(use_wc=True, wc_coefficient=0.01, use_ei=True, entropy_mode="max",
                           entropy_coefficient=0.5)
    return m, star, x, y, cfg


def _directional_errors(analytic_model, m, star, x, y, cfg, probes=10, step=1e-6):
    """Autograd on ``analytic_model`` vs float64 central differences on ``m`` along random directions."""
    def objective(model, snap, inputs, labels):
        return total_adaptation_loss(forward_softmax(model, inputs), labels, model, snap, cfg, dim=1).total

    dtype = next(analytic_model.parameters()).dtype
    analytic_model.zero_grad()
    objective(analytic_model, star.to(dtype), x.to(dtype), y.to(dtype)).backward()
    grads = [p.grad.double() for p in analytic_model.parameters()]
    params = list(m.parameters())
    errors = []
    for _ in range(probes):
        direction = [torch.randn_like(p) for p in params]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
        with torch.no_grad():
            for p, d in zip(params, direction):
                p.add_(step * d)
            up = objective(m, star, x, y).item()
            for p, d in zip(params, direction):
                p.sub_(2 * step * d)
            down = objective(m, star, x, y).item()
            for p, d in zip(params, direction):
                p.add_(step * d)
        numeric = (up - down) / (2 * step)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return errors


def test_gradient_through_micro_model():
    """Directional finite differences of the full objective through a 2-stage net."""
    m, star, x, y, cfg = _micro_problem(0)
    assert max(_directional_errors(m, m, star, x, y, cfg)) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_float32_gradient_through_micro_model(seed):
    """Float32 autograd against float64 differences taken at the same weights."""
    m, star, x, y, cfg = _micro_problem(seed)
    m32 = copy.deepcopy(m).float()
    assert max(_directional_errors(m32, m, star, x, y, cfg)) < 1e-3

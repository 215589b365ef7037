import subprocess
import sys

import numpy as np
import pytest
import torch

from relight.colormap import color_map_batch
from relight.nets import (
    DGNet,
    DegradationEncoder,
    Denoiser,
    ModelConfig,
    build_models,
    freeze,
    kaiming_init_,
    sinusoidal_time_embedding,
)
from relight.training import l1_loss, param_hash

TOY = ModelConfig(base_width=4, enc_width=4)


def _models(config=TOY, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    encoder, dgnet, denoiser = build_models(config, gen)
    for m in (encoder, dgnet, denoiser):
        m.to(dtype)
    return encoder, dgnet, denoiser


class TestEncoder:
    @pytest.mark.parametrize("size", [64, 96, 128])
    def test_scale_contract(self, size):
        encoder, _, _ = _models()
        maps = encoder(torch.rand(1, 3, size, size))
        assert len(maps) == 4
        for i, m in enumerate(maps):
            assert m.shape[-2:] == (size // 2**i, size // 2**i)
            assert torch.isfinite(m).all()

    def test_shape_arithmetic_128(self):
        encoder = DegradationEncoder(ModelConfig(base_width=32, enc_width=32))
        maps = encoder(torch.rand(1, 3, 128, 128))
        assert [tuple(m.shape[-2:]) for m in maps] == [
            (128, 128), (64, 64), (32, 32), (16, 16),
        ]

    def test_rejects_non_divisible(self):
        encoder, _, _ = _models()
        with pytest.raises(ValueError):
            encoder(torch.rand(1, 3, 60, 60))

    def test_deterministic(self):
        encoder, _, _ = _models()
        y = torch.rand(1, 3, 32, 32)
        a = encoder(y)
        b = encoder(y)
        for ma, mb in zip(a, b):
            assert torch.equal(ma, mb)

    def test_named_parameter_keys(self):
        encoder, _, _ = _models()
        keys = set(encoder.state_dict())
        assert "stage1.weight" in keys and "proj4.bias" in keys


class TestFreeze:
    def test_frozen_params_survive_optimizer_steps(self):
        encoder, _, _ = _models()
        freeze(encoder)
        before = param_hash(encoder)
        # no trainable params: nothing to give the optimizer
        assert [p for p in encoder.parameters() if p.requires_grad] == []
        assert param_hash(encoder) == before

    def test_freeze_idempotent(self):
        encoder, _, _ = _models()
        freeze(encoder)
        h1 = param_hash(encoder)
        freeze(encoder)
        assert param_hash(encoder) == h1

    def test_unfrozen_control_changes_hash(self):
        encoder, _, _ = _models()
        before = param_hash(encoder)
        opt = torch.optim.Adam(encoder.parameters(), lr=1e-3)
        y = torch.rand(2, 3, 16, 16)
        for _ in range(100):
            opt.zero_grad()
            sum(m.sum() for m in encoder(y)).backward()
            opt.step()
        assert param_hash(encoder) != before


class TestDGNet:
    def test_zero_head_outputs_half(self):
        encoder, dgnet, _ = _models()
        x = torch.rand(1, 3, 16, 16)
        out = dgnet(x, encoder(x))
        assert torch.allclose(out, torch.full_like(out, 0.5))

    def test_deterministic(self):
        encoder, dgnet, _ = _models(seed=3)
        kaiming_init_(dgnet)  # non-degenerate head
        x = torch.rand(1, 3, 16, 16)
        rep = encoder(x)
        assert torch.equal(dgnet(x, rep), dgnet(x, rep))

    def test_output_in_unit_interval(self):
        encoder, dgnet, _ = _models(seed=1)
        kaiming_init_(dgnet)
        out = dgnet(torch.rand(2, 3, 16, 16) * 10, encoder(torch.rand(2, 3, 16, 16)))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_rejects_scale_mismatch(self):
        encoder, dgnet, _ = _models()
        rep = encoder(torch.rand(1, 3, 32, 32))
        with pytest.raises(ValueError):
            dgnet(torch.rand(1, 3, 16, 16), rep)


class TestL1Loss:
    def test_examples(self):
        a = torch.zeros(2, 2)
        assert float(l1_loss(a, a)) == 0.0
        assert float(l1_loss(torch.zeros(3), torch.ones(3))) == 1.0
        got = l1_loss(torch.tensor([0.0, 0.5]), torch.tensor([0.25, 0.25]))
        assert float(got) == pytest.approx(0.25)

    def test_symmetry_nonneg(self):
        a, b = torch.rand(4, 4), torch.rand(4, 4)
        assert float(l1_loss(a, b)) == pytest.approx(float(l1_loss(b, a)))
        assert float(l1_loss(a, b)) >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(torch.zeros(2), torch.zeros(3))


class TestDenoiser:
    def test_zero_head_outputs_zero(self):
        encoder, _, denoiser = _models()
        y = torch.rand(1, 3, 16, 16)
        e = denoiser.predict_noise(
            torch.rand(1, 3, 16, 16), y, encoder(y), color_map_batch(y),
            torch.tensor([5]),
        )
        assert torch.all(e == 0.0)

    @pytest.mark.parametrize("size", [64, 128])
    def test_shape_contract(self, size):
        encoder, _, denoiser = _models(seed=2)
        y = torch.rand(1, 3, size, size)
        e = denoiser.predict_noise(
            torch.rand(1, 3, size, size), y, encoder(y), color_map_batch(y),
            torch.tensor([1]),
        )
        assert e.shape == (1, 3, size, size)

    def test_rejects_shape_mismatch(self):
        encoder, _, denoiser = _models()
        y = torch.rand(1, 3, 16, 16)
        with pytest.raises(ValueError):
            denoiser.predict_noise(
                torch.rand(1, 3, 32, 32), y, encoder(y), color_map_batch(y),
                torch.tensor([1]),
            )

    def test_deterministic_across_processes(self):
        script = (
            "import torch, hashlib;"
            "from relight.nets import ModelConfig, build_models;"
            "from relight.colormap import color_map_batch;"
            "gen = torch.Generator().manual_seed(11);"
            "enc, _, den = build_models(ModelConfig(4, 4), gen);"
            "data = torch.Generator().manual_seed(5);"
            "y = torch.rand(1, 3, 16, 16, generator=data);"
            "xt = torch.rand(1, 3, 16, 16, generator=data);"
            "e = den.predict_noise(xt, y, enc(y), color_map_batch(y), torch.tensor([7]));"
            "print(hashlib.sha256(e.detach().numpy().tobytes()).hexdigest())"
        )
        runs = [
            subprocess.run(
                [sys.executable, "-c", script], capture_output=True, text=True, check=True
            ).stdout
            for _ in range(2)
        ]
        assert runs[0] == runs[1]


class TestTimeEmbedding:
    def test_distinct_timesteps_distinct_embeddings(self):
        t = torch.arange(1, 1001)
        emb = sinusoidal_time_embedding(t, 16)
        assert emb.shape == (1000, 16)
        assert torch.unique(emb, dim=0).shape[0] == 1000

    def test_rejects_odd_dim(self):
        with pytest.raises(ValueError):
            sinusoidal_time_embedding(torch.tensor([1]), 7)


def check_gradients(
    f, f_ref, modules, modules_ref, n_weights, rel_tol, h, min_scale, seed=0
):
    """Compare backprop gradients of f against central differences of f_ref.

    modules_ref is a float64 twin of modules (same parameter values);
    finite differences always run at 64-bit so the oracle's own error
    stays far below the tolerance being checked. Weights whose gradient
    magnitude is below min_scale are redrawn: with a loss of size O(1)
    the difference quotient carries ~eps/(2h) of roundoff, so relative
    error below rel_tol is only resolvable for large enough gradients.
    """
    loss = f()
    for m in modules:
        m.zero_grad()
    loss.backward()
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    params_ref = [p for m in modules_ref for p in m.parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    checked = 0
    while checked < n_weights:
        j = int(rng.integers(len(params)))
        p, p_ref = params[j], params_ref[j]
        idx = int(rng.integers(p.numel()))
        analytic = p.grad.view(-1)[idx].item()
        with torch.no_grad():
            orig = p_ref.view(-1)[idx].item()
            p_ref.view(-1)[idx] = orig + h
            hi = f_ref().item()
            p_ref.view(-1)[idx] = orig - h
            lo = f_ref().item()
            p_ref.view(-1)[idx] = orig
        numeric = (hi - lo) / (2 * h)
        scale = max(abs(analytic), abs(numeric))
        if scale < min_scale:
            continue  # below the oracle's resolvable range
        assert abs(analytic - numeric) / scale < rel_tol, (
            f"grad mismatch: analytic {analytic} vs numeric {numeric}"
        )
        checked += 1


class GradCheckSetup:
    """Float64 reference models plus (optionally) float32 working copies."""

    def __init__(self, dtype):
        import copy

        encoder, dgnet, denoiser = _models(seed=4, dtype=torch.float64)
        kaiming_init_(dgnet)
        kaiming_init_(denoiser)
        self.ref = (encoder, dgnet, denoiser)
        self.work = tuple(copy.deepcopy(m).to(dtype) for m in self.ref)
        gen = torch.Generator().manual_seed(9)
        self.x64 = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
        self.y64 = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
        self.x = self.x64.to(dtype)
        self.y = self.y64.to(dtype)


class TestGradients:
    def test_dgnet_l1_gradient_64bit(self):
        s = GradCheckSetup(torch.float64)
        encoder, dgnet, _ = s.work
        encoder_r, dgnet_r, _ = s.ref
        f = lambda: l1_loss(dgnet(s.x, encoder(s.y)), s.y)
        f_ref = lambda: l1_loss(dgnet_r(s.x64, encoder_r(s.y64)), s.y64)
        check_gradients(
            f, f_ref, [dgnet, encoder], [dgnet_r, encoder_r], 20, 1e-5, 1e-5, 1e-6
        )

    def test_denoiser_mse_gradient_64bit(self):
        s = GradCheckSetup(torch.float64)
        encoder, _, denoiser = s.work
        encoder_r, _, denoiser_r = s.ref
        gen = torch.Generator().manual_seed(3)
        eps = torch.randn(s.x64.shape, generator=gen, dtype=torch.float64)
        x_t = 0.7 * s.x64 + 0.5 * eps
        t = torch.tensor([17])

        def loss_with(enc, den, x_t_, y_, eps_):
            e = den.predict_noise(x_t_, y_, enc(y_), color_map_batch(y_), t)
            return ((e - eps_) ** 2).mean()

        f = lambda: loss_with(encoder, denoiser, x_t.to(s.x.dtype), s.y, eps.to(s.x.dtype))
        f_ref = lambda: loss_with(encoder_r, denoiser_r, x_t, s.y64, eps)
        check_gradients(
            f, f_ref, [denoiser, encoder], [denoiser_r, encoder_r], 20, 1e-5, 1e-5, 1e-6
        )

    def test_dgnet_l1_gradient_32bit(self):
        s = GradCheckSetup(torch.float32)
        encoder, dgnet, _ = s.work
        encoder_r, dgnet_r, _ = s.ref
        f = lambda: l1_loss(dgnet(s.x, encoder(s.y)), s.y)
        f_ref = lambda: l1_loss(dgnet_r(s.x64, encoder_r(s.y64)), s.y64)
        check_gradients(
            f, f_ref, [dgnet, encoder], [dgnet_r, encoder_r], 20, 1e-3, 1e-5, 1e-5
        )

    def test_denoiser_mse_gradient_32bit(self):
        s = GradCheckSetup(torch.float32)
        encoder, _, denoiser = s.work
        encoder_r, _, denoiser_r = s.ref
        gen = torch.Generator().manual_seed(3)
        eps = torch.randn(s.x64.shape, generator=gen, dtype=torch.float64)
        x_t = 0.7 * s.x64 + 0.5 * eps
        t = torch.tensor([17])

        def loss_with(enc, den, x_t_, y_, eps_):
            e = den.predict_noise(x_t_, y_, enc(y_), color_map_batch(y_), t)
            return ((e - eps_) ** 2).mean()

        f = lambda: loss_with(encoder, denoiser, x_t.to(s.x.dtype), s.y, eps.to(s.x.dtype))
        f_ref = lambda: loss_with(encoder_r, denoiser_r, x_t, s.y64, eps)
        check_gradients(
            f, f_ref, [denoiser, encoder], [denoiser_r, encoder_r], 20, 1e-3, 1e-5, 1e-5
        )

import numpy as np
import pytest

from shapeflow import autodiff as ad
from shapeflow.autodiff import Tensor
from shapeflow.flow import (
    COND_KINDS,
    ConditionInput,
    FlowConfig,
    FlowModel,
    condition_features,
    interpolate,
)
from shapeflow.params import Adam

from conftest import norm_rel_error


@pytest.fixture(scope="module")
def tiny_flow():
    cfg = FlowConfig(enc_blocks=2, mid_blocks=1, dec_blocks=2, width=48, cond_dim=32,
                     latent_dim=8, token_count=16, heads=4)
    return FlowModel(cfg, seed=0)


class TestInterpolate:
    def test_quarter_point(self):
        xt, v = interpolate(np.zeros(4), np.ones(4), 0.25)
        assert np.allclose(xt, 0.25) and np.allclose(v, 1.0)

    def test_endpoints(self, rng):
        x0 = rng.normal(size=(3, 4)).astype(np.float32)
        x1 = rng.normal(size=(3, 4)).astype(np.float32)
        xt0, _ = interpolate(x0, x1, 0.0)
        xt1, _ = interpolate(x0, x1, 1.0)
        assert np.array_equal(xt0, x0)
        assert np.array_equal(xt1, x1)

    def test_velocity_independent_of_t(self, rng):
        x0 = rng.normal(size=(5,)).astype(np.float32)
        x1 = rng.normal(size=(5,)).astype(np.float32)
        _, v1 = interpolate(x0, x1, 0.2)
        _, v2 = interpolate(x0, x1, 0.9)
        assert np.array_equal(v1, v2)

    def test_t_out_of_range(self):
        with pytest.raises(ValueError):
            interpolate(np.zeros(2), np.ones(2), 1.5)


class TestTimestepEmbed:
    def test_deterministic(self, tiny_flow):
        a = tiny_flow.timestep_embed(0.3)
        b = tiny_flow.timestep_embed(0.3)
        assert np.array_equal(a.data, b.data)

    def test_distinct_endpoints(self, tiny_flow):
        a = tiny_flow.timestep_embed(0.0)
        b = tiny_flow.timestep_embed(1.0)
        assert np.linalg.norm(a.data - b.data) > 0.0

    def test_width_contract(self, tiny_flow):
        assert tiny_flow.timestep_embed(0.5).shape == (1, tiny_flow.config.width)


class TestConditionEncode:
    def test_deterministic(self, tiny_flow, sphere_spec):
        f1 = condition_features(sphere_spec, "normal")
        f2 = condition_features(sphere_spec, "normal")
        assert np.array_equal(f1, f2)
        t1 = tiny_flow.embed_condition(f1, "normal")
        t2 = tiny_flow.embed_condition(f2, "normal")
        assert np.array_equal(t1.tokens.data, t2.tokens.data)

    def test_kinds_differ(self, tiny_flow, sphere_spec):
        fn = condition_features(sphere_spec, "normal")
        fa = condition_features(sphere_spec, "appearance")
        tn = tiny_flow.embed_condition(fn, "normal")
        ta = tiny_flow.embed_condition(fa, "appearance")
        assert not np.allclose(tn.tokens.data, ta.tokens.data)
        # the type embedding alone separates kinds even on identical features
        t_same_n = tiny_flow.embed_condition(fn, "normal")
        t_same_a = tiny_flow.embed_condition(fn, "appearance")
        assert not np.allclose(t_same_n.tokens.data, t_same_a.tokens.data)

    def test_token_count_contract(self, tiny_flow, sphere_spec):
        feats = condition_features(sphere_spec, "normal", blocks=(8, 8))
        assert feats.shape == (64, 4)
        tokens = tiny_flow.embed_condition(feats, "normal").tokens
        assert tokens.shape == (64, tiny_flow.config.cond_dim)

    def test_empty_render_raises(self):
        with pytest.raises(ValueError):
            condition_features(lambda p: np.full(len(p), 1.0), "normal")

    def test_bad_kind(self, sphere_spec):
        with pytest.raises(ValueError):
            condition_features(sphere_spec, "rgbd")
        with pytest.raises(ValueError):
            ConditionInput("rgbd", Tensor(np.zeros((4, 8))))


class TestDitForward:
    def test_fresh_model_outputs_zero(self, tiny_flow, rng):
        x = rng.standard_normal((16, 8)).astype(np.float32)
        out = tiny_flow.dit_forward(x, 0.5)
        assert np.abs(out.data).max() == 0.0

    def test_token_count_agnostic(self, tiny_flow, rng):
        for k in (4, 16, 40):
            x = rng.standard_normal((k, 8)).astype(np.float32)
            out = tiny_flow.dit_forward(x, 0.1)
            assert out.shape == (k, 8)

    def test_skip_fusion_oracle(self, rng):
        # zeroing the skip half of the fusion weights must equal the
        # skip-free forward pass
        cfg = FlowConfig(enc_blocks=2, mid_blocks=1, dec_blocks=2, width=32,
                         cond_dim=16, latent_dim=4, token_count=8, heads=2)
        model = FlowModel(cfg, seed=3)
        for p in model.params.values():  # give the head real values
            if p.data.std() == 0 and p.data.ndim == 2:
                p.data = rng.normal(0, 0.05, p.data.shape).astype(np.float32)
        x = rng.standard_normal((8, 4)).astype(np.float32)
        for i in range(cfg.dec_blocks):
            w = model.params[f"fuse{i}.w"]
            w.data[cfg.width:, :] = 0.0
        with_skips = model.dit_forward(x, 0.4, use_skips=True)
        without = model.dit_forward(x, 0.4, use_skips=False)
        assert np.abs(with_skips.data - without.data).max() < 1e-6

    def test_enc_dec_pairing_enforced(self):
        with pytest.raises(ValueError):
            FlowConfig(enc_blocks=3, dec_blocks=2)


class TestTraining:
    def test_perfect_model_zero_loss(self, rng):
        cfg = FlowConfig(enc_blocks=1, mid_blocks=1, dec_blocks=1, width=32,
                         cond_dim=16, latent_dim=4, token_count=8, heads=2)
        model = FlowModel(cfg, seed=0)
        x1 = rng.standard_normal((4, 8, 4)).astype(np.float32)

        forced = {}

        def fake_forward(x_t, ts, cond_tokens=None, use_skips=True):
            return Tensor(forced["v"])

        x0_rng = np.random.default_rng(1)
        # replicate the loss draw to force v_target
        x0 = x0_rng.standard_normal(x1.shape).astype(np.float32)
        ts = x0_rng.uniform(0, 1, 4).astype(np.float32)
        forced["v"] = x1 - x0
        model.forward_batch = fake_forward
        loss = model.flow_loss(x1, None, np.random.default_rng(1))
        assert loss.item() < 1e-10

    def test_zero_init_expected_loss(self):
        cfg = FlowConfig(enc_blocks=1, mid_blocks=1, dec_blocks=1, width=32,
                         cond_dim=16, latent_dim=8, token_count=4, heads=2)
        model = FlowModel(cfg, seed=0)
        rng = np.random.default_rng(2)
        losses = [model.flow_loss(np.zeros((4, 4, 8), np.float32), None, rng).item()
                  for _ in range(250)]
        assert abs(np.mean(losses) - 8.0) < 0.8  # E||x0||^2 = latent_dim per token

    def test_loss_decreases_on_memorization(self):
        # unconditional, iid latents: a weak setting, so expect modest progress
        # (the 10-shape >=50% check runs on real latents in test_pipeline)
        cfg = FlowConfig(enc_blocks=1, mid_blocks=1, dec_blocks=1, width=32,
                         cond_dim=16, latent_dim=4, token_count=4, heads=2)
        model = FlowModel(cfg, seed=1)
        opt = Adam(model.params, lr=3e-3)
        x1 = 0.5 * np.random.default_rng(5).standard_normal((10, 4, 4)).astype(np.float32)
        hist = [model.train_step(opt, x1, rng=np.random.default_rng(100 + i))
                for i in range(400)]
        assert np.mean(hist[-20:]) < 0.8 * np.mean(hist[:10])

    def test_gradcheck_small_model(self, rng):
        cfg = FlowConfig(enc_blocks=1, mid_blocks=1, dec_blocks=1, width=16,
                         cond_dim=8, latent_dim=4, token_count=3, heads=2)
        model = FlowModel(cfg, seed=0)
        x1 = rng.standard_normal((2, 3, 4)).astype(np.float32)

        def loss_fn():
            return model.flow_loss(x1, None, np.random.default_rng(7))

        from shapeflow.params import zero_grads
        from shapeflow.autodiff import finite_diff_grad

        zero_grads(model.params)
        ad.backward(loss_fn())
        for name in ("in.w", "mid0.sa.wq.w", "head.b", "fuse0.w"):
            p = model.params[name]
            saved = p.data.copy()

            def f(arr, p=p):
                p.data = arr.astype(np.float32)
                return loss_fn().item()

            fd = finite_diff_grad(f, saved, h=1e-2)
            p.data = saved
            got = p.grad if p.grad is not None else np.zeros_like(saved)
            assert norm_rel_error(got, fd) < 1e-2, name


class TestEulerSample:
    def test_constant_field_exact_endpoint(self, tiny_flow, rng):
        # dyadic values make float addition exact, so steps=1 is bitwise
        x0 = (rng.integers(-8, 8, (16, 8)) / 8.0).astype(np.float32)
        x1 = (rng.integers(-8, 8, (16, 8)) / 8.0).astype(np.float32)
        v = x1 - x0
        model = FlowModel(tiny_flow.config, seed=0)
        model.dit_forward = lambda x, t, cond: Tensor(v)
        out = model.euler_sample(None, 1, x0)
        assert np.array_equal(out, x1)

    def test_nfe_accounting(self, tiny_flow, rng):
        tiny_flow.reset_nfe()
        x0 = rng.standard_normal((16, 8)).astype(np.float32)
        tiny_flow.euler_sample(None, 50, x0)
        assert tiny_flow.nfe == 50
        tiny_flow.euler_sample(None, 7, x0)
        assert tiny_flow.nfe == 57

    def test_deterministic(self, tiny_flow, sphere_spec, rng):
        feats = condition_features(sphere_spec, "normal")
        cond = tiny_flow.embed_condition(feats, "normal")
        x0 = rng.standard_normal((16, 8)).astype(np.float32)
        a = tiny_flow.euler_sample(cond, 5, x0)
        b = tiny_flow.euler_sample(cond, 5, x0)
        assert np.array_equal(a, b)

    def test_steps_floor(self, tiny_flow, rng):
        with pytest.raises(ValueError):
            tiny_flow.euler_sample(None, 0, rng.standard_normal((16, 8)).astype(np.float32))

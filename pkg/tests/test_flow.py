import numpy as np
import pytest

from conftest import tiny_model_config
from gated_dit.config import FlowConfig, TrainMode
from gated_dit.data import TaskKind, make_batch
from gated_dit.errors import GatedDiTError, NonFiniteLossError
from gated_dit.flow import (
    OptimizerState, adam_update, euler_sample, flow_loss_fn, fm_loss, make_flow_sample,
    sample_grid, train_step,
)
from gated_dit.model import attach_lora, init_params
from gated_dit.numerics import constant, mse, parameter


class TestFlowSample:
    def test_straight_path(self, rng):
        x0 = rng.uniform(size=(3, 4, 4))
        fs = make_flow_sample(x0, rng, t=0.25)
        np.testing.assert_allclose(fs.x_t, 0.75 * x0 + 0.25 * fs.x1)
        np.testing.assert_allclose(fs.u_t, fs.x1 - x0)

    def test_endpoints(self, rng):
        x0 = rng.uniform(size=(3, 4, 4))
        np.testing.assert_array_equal(make_flow_sample(x0, rng, t=0.0).x_t, x0)
        fs = make_flow_sample(x0, rng, t=1.0)
        np.testing.assert_array_equal(fs.x_t, fs.x1)

    def test_perfect_prediction_has_zero_loss(self, rng):
        fs = make_flow_sample(rng.uniform(size=(3, 4, 4)), rng)
        assert fm_loss(constant(fs.u_t), fs).item() == 0.0


class TestOptimizer:
    def test_adam_minimizes_quadratic(self):
        target = np.array([[1.5, -2.0, 0.25]])
        w = parameter(np.zeros((1, 3)), name="w")
        opt = OptimizerState(lr=0.1, weight_decay=0.0)

        def loss_fn(params, batch):
            return mse(params["w"], constant(target))

        for _ in range(500):
            train_step({"w": w}, [None], opt, ["w"], loss_fn)
        np.testing.assert_allclose(w.data, target, atol=1e-3)
        assert opt.step == 500

    def test_zero_learning_rate_changes_nothing(self):
        w = parameter(np.ones((2, 2)), name="w")
        opt = OptimizerState(lr=0.0)
        adam_update({"w": w}, {"w": np.ones((2, 2))}, opt)
        np.testing.assert_array_equal(w.data, np.ones((2, 2)))

    def test_decoupled_weight_decay(self):
        w = parameter(np.full((1, 1), 2.0), name="w")
        opt = OptimizerState(lr=0.1, weight_decay=0.5)
        adam_update({"w": w}, {"w": np.zeros((1, 1))}, opt)
        np.testing.assert_allclose(w.data, [[2.0 * (1 - 0.05)]])

    def test_from_config(self):
        opt = OptimizerState.from_config(FlowConfig(lr=3e-4, weight_decay=0.0))
        assert (opt.lr, opt.weight_decay, opt.step) == (3e-4, 0.0, 0)


class TestTrainStep:
    def test_frozen_tensors_untouched(self, rng):
        cfg = tiny_model_config()
        params = attach_lora(init_params(cfg, np.random.default_rng(0)), cfg, np.random.default_rng(1))
        # a trained base has a non-zero output projection; at zero nothing upstream gets gradient
        params["unembed.weight"].data[...] = rng.standard_normal(params["unembed.weight"].shape) * 0.1
        params.set_mode(TrainMode.FINETUNE)
        frozen = {n: params[n].data.copy() for n in params.names("backbone")}
        gates = {n: params[n].data.copy() for n in params.names("gate")}
        batch = make_batch(TaskKind.EDGE, 2, rng, image_size=8)
        opt = OptimizerState(lr=1e-2)
        for _ in range(2):
            loss = train_step(params, batch, opt, params.trainable, flow_loss_fn(cfg, rng, cond_dropout=0.0))
            assert np.isfinite(loss)
        for name, before in frozen.items():
            np.testing.assert_array_equal(params[name].data, before, err_msg=name)
        assert any(not np.array_equal(params[n].data, gates[n]) for n in gates)

    def test_non_finite_loss(self):
        w = parameter(np.array([[np.inf]]), name="w")
        with pytest.raises(NonFiniteLossError) as info:
            train_step({"w": w}, [None], OptimizerState(), ["w"],
                       lambda p, b: mse(p["w"], constant(np.zeros((1, 1)))), step=7)
        assert info.value.step == 7

    def test_empty_batch(self):
        with pytest.raises(GatedDiTError):
            train_step({}, [], OptimizerState(), [], lambda p, b: None)


class TestSampling:
    def test_exact_field_recovers_target(self, rng):
        x0 = rng.uniform(size=(3, 4, 4))
        x1 = rng.standard_normal((3, 4, 4))

        def field(x, t, cond):
            return (x - x0) / t

        for steps in (1, 4, 16):
            out = euler_sample(field, None, steps, x1=x1, clamp=None)
            np.testing.assert_allclose(out, x0, atol=1e-10)

    def test_guidance_extrapolates(self, rng):
        a, b = np.full((1, 2, 2), 0.3), np.full((1, 2, 2), 0.1)

        def model(x, t, cond):
            return a if cond is not None else b

        x1 = np.ones((1, 2, 2))
        out = euler_sample(model, "cond", 1, x1=x1, guidance_scale=3.0, clamp=None)
        np.testing.assert_allclose(out, x1 - (b + 3.0 * (a - b)))
        plain = euler_sample(model, "cond", 1, x1=x1, guidance_scale=1.0, clamp=None)
        np.testing.assert_allclose(plain, x1 - a)

    def test_clamped_after_last_step(self):
        out = euler_sample(lambda x, t, c: np.zeros_like(x), None, 3, x1=np.array([[[-2.0, 0.5, 4.0]]]))
        np.testing.assert_array_equal(out, [[[0.0, 0.5, 1.0]]])

    def test_needs_noise_source(self):
        with pytest.raises(GatedDiTError):
            euler_sample(lambda x, t, c: x, None, 2)
        with pytest.raises(GatedDiTError):
            euler_sample(lambda x, t, c: x, None, 0, x1=np.zeros((1, 1, 1)))

    def test_grid_shares_noise_across_settings(self):
        def still(x, t, cond):
            return np.zeros_like(x)

        grid = sample_grid(still, [None, None], [1, 4], [1.0, 2.0], seed=3, shape=(3, 4, 4))
        assert set(grid) == {(1, 1.0), (1, 2.0), (4, 1.0), (4, 2.0)}
        for images in grid.values():
            np.testing.assert_array_equal(images[0], grid[(1, 1.0)][0])
        assert not np.array_equal(grid[(1, 1.0)][0], grid[(1, 1.0)][1])

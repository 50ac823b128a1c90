import math

import numpy as np
import pytest

from rin import rng as rngs
from rin.diffusion import (
    COSINE,
    SIGMOID,
    SamplerSpec,
    ScheduleSpec,
    ddim_step,
    ddpm_step,
    gamma,
    generate,
    log_snr,
    noisify,
    predict_x0,
    train_loss,
    write_schedule_csv,
)
from rin.errors import ContractError, ScheduleError
from rin.model import RIN, ModelConfig
from rin.tensor import backward


def sigmoid_reference(t, start=-3.0, end=3.0, tau=0.9, clip_min=1e-9):
    """Logistic form, scalar math only."""
    sig = lambda u: 1.0 / (1.0 + math.exp(-u))
    v_start, v_end = sig(start / tau), sig(end / tau)
    out = (v_end - sig((t * (end - start) + start) / tau)) / (v_end - v_start)
    return min(max(out, clip_min), 1.0)


def cosine_reference(t, ns=0.0002, ds=0.00025):
    return math.cos((t + ns) / (1 + ds) * math.pi / 2) ** 2


class TestSchedules:
    @pytest.mark.parametrize("t", np.linspace(0, 1, 41))
    def test_match_reference(self, t):
        assert gamma(SIGMOID, t) == pytest.approx(sigmoid_reference(t), abs=1e-12)
        assert gamma(COSINE, t) == pytest.approx(cosine_reference(t), abs=1e-12)

    @pytest.mark.parametrize("tau", [0.3, 0.7, 1.1])
    def test_other_temperatures(self, tau):
        spec = ScheduleSpec(kind="sigmoid", tau=tau)
        for t in np.linspace(0, 1, 11):
            assert gamma(spec, t) == pytest.approx(sigmoid_reference(t, tau=tau), abs=1e-12)

    def test_sigmoid_endpoints_and_midpoint(self):
        assert gamma(SIGMOID, 0.0) == 1.0
        assert gamma(SIGMOID, 1.0) == 1e-9
        assert gamma(SIGMOID, 0.5) == 0.5

    @pytest.mark.parametrize("spec", [COSINE, SIGMOID, ScheduleSpec(kind="sigmoid", tau=0.3)])
    def test_monotone(self, spec):
        g = gamma(spec, np.linspace(0, 1, 1001))
        assert np.all(np.diff(g) <= 0)

    def test_t_out_of_range(self):
        with pytest.raises(ContractError, match="t must lie"):
            gamma(COSINE, 1.2)

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            ScheduleSpec(kind="linear")

    def test_log_snr_zero_at_half(self):
        assert log_snr(SIGMOID, 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_csv_export(self, tmp_path):
        path = tmp_path / "schedules.csv"
        write_schedule_csv(path, {"cosine": COSINE, "sigmoid": SIGMOID})
        lines = path.read_text().splitlines()
        assert lines[0] == "t,cosine_gamma,cosine_logsnr,sigmoid_gamma,sigmoid_logsnr"
        assert len(lines) == 1002


class TestNoisify:
    def test_interpolates(self, rng):
        x0, eps = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        t = np.array([0.0, 0.5])
        out = noisify(x0, t, eps, SIGMOID)
        np.testing.assert_allclose(out[0], x0[0])
        np.testing.assert_allclose(out[1], math.sqrt(0.5) * (x0[1] + eps[1]))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            noisify(np.zeros(3), 0.5, np.zeros(4), COSINE)


class TestReverseSteps:
    def test_ddim_same_time_is_identity(self, rng):
        x0 = rng.uniform(-0.9, 0.9, (4, 5))
        eps = rng.standard_normal((4, 5))
        x_t = noisify(x0, 0.4, eps, COSINE)
        np.testing.assert_allclose(ddim_step(x_t, eps, 0.4, 0.4, COSINE), x_t, atol=1e-12)

    def test_perfect_prediction_recovers_data(self, rng):
        x0 = rng.uniform(-1, 1, (4, 5))
        eps = rng.standard_normal((4, 5))
        x_t = noisify(x0, 0.7, eps, COSINE)
        np.testing.assert_allclose(predict_x0(x_t, eps, 0.7, COSINE), x0, atol=1e-12)
        # the sigmoid family reaches gamma = 1 exactly at t = 0
        x_t = noisify(x0, 0.7, eps, SIGMOID)
        np.testing.assert_allclose(ddim_step(x_t, eps, 0.7, 0.0, SIGMOID), x0, atol=1e-12)

    def test_ddpm_scalar_formula(self):
        x_t, eps_pred, z = 0.3, -0.2, 0.7
        g_now, g_next = gamma(COSINE, 0.6), gamma(COSINE, 0.5)
        x_pred = max(min((x_t - math.sqrt(1 - g_now) * eps_pred) / math.sqrt(g_now), 1.0), -1.0)
        eps = (x_t - math.sqrt(g_now) * x_pred) / math.sqrt(1 - g_now)
        alpha = g_now / g_next
        expected = (x_t - (1 - alpha) / math.sqrt(1 - g_now) * eps) / math.sqrt(alpha) + math.sqrt(1 - alpha) * z
        got = ddpm_step(np.array([x_t]), np.array([eps_pred]), 0.6, 0.5, COSINE, 1.0, np.array([z]))
        assert got[0] == pytest.approx(expected, abs=1e-12)

    def test_clipping_applies(self):
        x_t = np.array([0.9])
        out = ddim_step(x_t, np.array([-5.0]), 0.5, 0.0, SIGMOID, clip_scale=1.0)
        assert out[0] == 1.0

    def test_time_order(self):
        with pytest.raises(ContractError, match="t_next"):
            ddim_step(np.zeros(1), np.zeros(1), 0.2, 0.5, COSINE)

    def test_zero_gamma_rejected(self):
        spec = ScheduleSpec(kind="sigmoid", clip_min=0.0)
        with pytest.raises(ScheduleError):
            ddim_step(np.zeros(1), np.zeros(1), 1.0, 0.5, spec)


def _model(**kw):
    base = dict(input_shape=(4, 4, 3), patch_size=2, num_blocks=1, layers_per_block=1,
                num_latents=2, latent_dim=8, interface_dim=8, heads=2)
    base.update(kw)
    return RIN(ModelConfig(**base), seed=3, dtype=np.float64)


class TestGenerate:
    def test_deterministic_ddim(self):
        model = _model()
        a = generate(model, COSINE, SamplerSpec(steps=5), count=2, seed=9)
        b = generate(model, COSINE, SamplerSpec(steps=5), count=2, seed=9)
        assert a.tobytes() == b.tobytes()

    def test_seed_changes_output(self):
        model = _model()
        a = generate(model, COSINE, SamplerSpec(steps=3), count=1, seed=1)
        b = generate(model, COSINE, SamplerSpec(steps=3), count=1, seed=2)
        assert not np.array_equal(a, b)

    def test_single_step_is_clipped_one_shot_prediction(self):
        model = _model()
        out = generate(model, SIGMOID, SamplerSpec(steps=1), count=2, seed=4)
        x1 = rngs.generator(4, rngs.SAMPLE, 0).standard_normal((2, 4, 4, 3))
        eps, _ = model.forward(x1, np.ones(2))
        np.testing.assert_allclose(out, predict_x0(x1, eps.data, 1.0, SIGMOID, clip_scale=1.0), atol=1e-12)

    def test_ddpm_runs_and_is_seeded(self):
        model = _model()
        a = generate(model, COSINE, SamplerSpec(rule="ddpm", steps=4), count=1, seed=3)
        b = generate(model, COSINE, SamplerSpec(rule="ddpm", steps=4), count=1, seed=3)
        c = generate(model, COSINE, SamplerSpec(rule="ddpm", steps=4), count=1, seed=4)
        assert a.tobytes() == b.tobytes() and not np.array_equal(a, c)

    def test_context_frames_kept(self, rng):
        model = _model(input_shape=(2, 4, 4, 3), patch_size=(1, 2, 2), context_frames=1)
        context = rng.uniform(-1, 1, (2, 1, 4, 4, 3))
        out = generate(model, COSINE, SamplerSpec(steps=3), count=2, seed=0, context=context)
        assert out[:, :1].tobytes() == context.tobytes()

    def test_context_required(self):
        model = _model(input_shape=(2, 4, 4, 3), patch_size=(1, 2, 2), context_frames=1)
        with pytest.raises(ContractError, match="context"):
            generate(model, COSINE, SamplerSpec(steps=1))


class TestTrainLoss:
    def test_zero_model_loss_is_noise_power(self):
        model = _model()
        for k in ("readout.w", "readout.b"):
            model.params[k].data[...] = 0.0
        loss = train_loss(model, np.zeros((64, 4, 4, 3)), None, COSINE, 0.0, np.random.default_rng(0))
        assert float(loss.data) == pytest.approx(1.0, abs=0.05)

    def test_self_cond_count(self):
        model = _model()
        stats = {}
        for i in range(20):
            train_loss(model, np.zeros((5, 4, 4, 3)), None, COSINE, 0.5, np.random.default_rng(i), stats)
        assert stats["examples"] == 100 and 0 < stats["self_cond"] < 100

    def test_rate_bounds(self):
        with pytest.raises(ContractError):
            train_loss(_model(), np.zeros((1, 4, 4, 3)), None, COSINE, 1.5, np.random.default_rng(0))

    def test_same_rng_same_loss(self):
        model = _model()
        x0 = np.random.default_rng(1).uniform(-1, 1, (4, 4, 4, 3))
        a = train_loss(model, x0, None, SIGMOID, 0.9, rngs.generator(0, rngs.NOISE, 5))
        b = train_loss(model, x0, None, SIGMOID, 0.9, rngs.generator(0, rngs.NOISE, 5))
        assert a.data == b.data
        assert backward(a)

"""Tests for the noise schedule, sampling, repainting, and the loops."""

import mpmath as mp
import numpy as np
import pytest

from helpers import band_lsd, speechlike
from speechsr import diffusion, networks
from speechsr.data import Batch
from speechsr.diffusion import (
    NoiseSchedule,
    forward_sample,
    inference_time_grid,
    mean_mu,
    repaint,
    reverse_infer,
    sigma,
    train_step,
)
from speechsr.dsp import Waveform
from speechsr.engine import Adam, Ema, Tensor
from speechsr.objectives import lambda_weight, loss_pred, loss_tf
from speechsr.resample import UpsamplingRatio, simulate_lr
from speechsr.engine import ops

SCHED = NoiseSchedule()


def sigma_mp(t, sched=SCHED, dps=50):
    """Independent arbitrary-precision evaluation of the schedule."""
    with mp.workdps(dps):
        t = mp.mpf(t)
        smin, smax, gam = mp.mpf(sched.sigma_min), mp.mpf(sched.sigma_max), mp.mpf(sched.gamma)
        ratio = smax / smin
        log_ratio = mp.log(ratio)
        var = smin**2 * (ratio ** (2 * t) - mp.e ** (-2 * gam * t)) * log_ratio / (gam + log_ratio)
        return float(mp.sqrt(var))


class TestSigma:
    def test_zero_at_origin(self):
        assert sigma(0.0, SCHED) == 0.0

    def test_matches_high_precision_oracle(self):
        for t in (0.001, 0.1, 0.25, 0.5, 0.777, 1.0):
            assert abs(sigma(t, SCHED) - sigma_mp(t)) < 1e-12

    def test_strictly_increasing_on_grid(self):
        grid = np.linspace(0.0, 1.0, 1001)
        vals = sigma(grid, SCHED)
        assert np.all(np.diff(vals) > 0)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            sigma(-0.01, SCHED)
        with pytest.raises(ValueError):
            sigma(1.01, SCHED)


class TestMeanMu:
    def test_t_zero_returns_x0(self):
        rng = np.random.default_rng(0)
        x0, y = rng.standard_normal(50), rng.standard_normal(50)
        np.testing.assert_array_equal(mean_mu(x0, y, 0.0, 1.5), x0)

    def test_equal_endpoints_fixed(self):
        x = np.random.default_rng(1).standard_normal(30)
        for t in (0.0, 0.3, 1.0, 2.5):
            np.testing.assert_allclose(mean_mu(x, x, t, 1.5), x, rtol=1e-15)

    def test_coefficients_at_t1(self):
        with mp.workdps(40):
            decay = float(mp.e ** mp.mpf("-1.5"))
        x0 = np.array([1.0, 0.0])
        y = np.array([0.0, 1.0])
        mu = mean_mu(x0, y, 1.0, 1.5)
        assert abs(mu[0] - decay) < 1e-12
        assert abs(mu[1] - (1.0 - decay)) < 1e-12

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(2)
        x0, y = rng.standard_normal(200), rng.standard_normal(200)
        for t in (0.0, 0.2, 0.7, 1.0, 3.0):
            mu = mean_mu(x0, y, t, 1.5)
            assert np.all(mu >= np.minimum(x0, y) - 1e-12)
            assert np.all(mu <= np.maximum(x0, y) + 1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mean_mu(np.zeros(3), np.zeros(4), 0.5, 1.5)


class TestForwardSample:
    def test_t_zero_exact(self):
        rng = np.random.default_rng(3)
        x0, y, z = (rng.standard_normal(40) for _ in range(3))
        np.testing.assert_array_equal(forward_sample(x0, y, 0.0, z, SCHED), x0)

    def test_zero_noise_gives_mean(self):
        rng = np.random.default_rng(4)
        x0, y = rng.standard_normal(40), rng.standard_normal(40)
        np.testing.assert_array_equal(
            forward_sample(x0, y, 0.5, np.zeros(40), SCHED),
            mean_mu(x0, y, 0.5, SCHED.gamma),
        )

    def test_monte_carlo_variance(self):
        rng = np.random.default_rng(5)
        x0 = rng.standard_normal(100)
        y = rng.standard_normal(100)
        t = 0.5
        mu = mean_mu(x0, y, t, SCHED.gamma)
        draws = np.stack([
            forward_sample(x0, y, t, rng.standard_normal(100), SCHED) - mu
            for _ in range(400)
        ])
        assert abs(draws.var() / sigma(t, SCHED) ** 2 - 1.0) < 0.03


class TestInferenceGrid:
    def test_grid_shape_and_endpoints(self):
        grid = inference_time_grid(SCHED)
        assert grid.size == 10
        assert grid[0] == (SCHED.total_steps - 1) / SCHED.total_steps
        assert grid[-1] == 0.0
        np.testing.assert_allclose(np.diff(grid), np.diff(grid)[0])


class TestRepaint:
    def setup_method(self):
        hr = speechlike(16000, seed=21)
        _, s_inp = simulate_lr(hr, UpsamplingRatio(2))
        self.hr = hr
        self.s_inp = s_inp.samples

    def test_zero_estimate_returns_input(self):
        out = repaint(np.zeros(16000), self.s_inp, 16000, UpsamplingRatio(2))
        np.testing.assert_array_equal(out, self.s_inp)

    def test_input_as_estimate_stays_close(self):
        out = repaint(self.s_inp, self.s_inp, 16000, UpsamplingRatio(2))
        assert band_lsd(Waveform(self.s_inp, 16000), Waveform(out, 16000),
                        0.0, 0.8 * 4000.0) < 0.3

    def test_band_contract_random_estimate(self):
        rng = np.random.default_rng(6)
        x0t = rng.standard_normal(16000) * np.std(self.s_inp)
        out = repaint(x0t, self.s_inp, 16000, UpsamplingRatio(2))
        low = band_lsd(Waveform(self.s_inp, 16000), Waveform(out, 16000),
                       0.0, 0.8 * 4000.0)
        high = band_lsd(Waveform(x0t, 16000), Waveform(out, 16000),
                        1.2 * 4000.0, 8000.0)
        assert low < 0.3
        assert high < 0.3

    def test_approximate_idempotence(self):
        rng = np.random.default_rng(7)
        x0t = rng.standard_normal(16000)
        once = repaint(x0t, self.s_inp, 16000, UpsamplingRatio(2))
        twice = repaint(once, self.s_inp, 16000, UpsamplingRatio(2))
        assert band_lsd(Waveform(once, 16000), Waveform(twice, 16000),
                        0.0, 0.8 * 4000.0) < 0.3

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            repaint(np.zeros(10), np.zeros(11), 16000, UpsamplingRatio(2))


def _tiny_model(seed=0):
    return networks.TwoStageModel(
        networks.tiny_arcn_config(), networks.tiny_dparn_config(), seed=seed
    )


def _toy_batch(n_items=2, n=4000, seed=0):
    rng = np.random.default_rng(seed)
    rows_hr, rows_inp = [], []
    for i in range(n_items):
        hr = speechlike(n, seed=100 + i).samples
        _, inp = simulate_lr(Waveform(hr, 16000), UpsamplingRatio(2))
        rows_hr.append(hr)
        rows_inp.append(inp.samples)
    return Batch(
        hr=np.stack(rows_hr), inp=np.stack(rows_inp),
        mask=np.ones((n_items, n)), ids=tuple(f"u{i}" for i in range(n_items)),
        sample_rate=16000,
    )


class TestTrainStep:
    def test_smoke_finite_and_updates(self):
        model = _tiny_model(seed=1)
        opt = Adam(model.params(), lr=1e-3)
        ema = Ema(model.params(), decay=0.9)
        batch = _toy_batch()
        before = {p.name: p.data.copy() for p in model.params()}
        out = train_step(model, batch, SCHED, opt, ema,
                         np.random.default_rng(0), UpsamplingRatio(2))
        r = out.report
        for v in (r.l_pred, r.l_time, r.l_freq, r.l_diff, r.total):
            assert np.isfinite(v) and v >= 0
        assert 0 < out.clip_scale <= 1.0
        moved = [n for n, old in before.items()
                 for p in model.params() if p.name == n and not np.array_equal(p.data, old)]
        assert moved

    def test_frozen_passthrough_reduces_to_closed_form(self):
        """Zeroed output heads make the loss L_pred(s_inp, hr) + lam*L_diff(s_inp, hr)."""
        model = _tiny_model(seed=2)
        model.dparn.out_proj.w.data[...] = 0.0
        model.dparn.out_proj.b.data[...] = 0.0
        model.arcn.out_conv.w.data[...] = 0.0
        model.arcn.out_conv.b.data[...] = 0.0
        batch = _toy_batch(n_items=1)
        hr, inp = batch.hr[0], batch.inp[0]
        k, z = 700, np.random.default_rng(8).standard_normal(hr.size)
        report = diffusion.validation_loss(model, hr, inp, SCHED,
                                           UpsamplingRatio(2), 16000, k, z)
        frame_len, hop = model.arcn.frame_geometry(16000)
        ire, iim = ops.stft_pair(Tensor(inp), frame_len, hop)
        rre, rim = ops.stft_pair(Tensor(hr), frame_len, hop)
        ref_pred = loss_pred(ire, iim, rre, rim).item()
        _, _, ref_diff = loss_tf(inp, hr, frame_len, hop)
        lam = lambda_weight(k / SCHED.total_steps)
        np.testing.assert_allclose(report.l_pred, ref_pred, rtol=1e-12)
        np.testing.assert_allclose(report.l_diff, ref_diff.item(), rtol=1e-12)
        np.testing.assert_allclose(report.total, ref_pred + lam * ref_diff.item(),
                                   rtol=1e-12)


class _OracleModel:
    """Stub whose diffusion stage always answers with the clean target."""

    def __init__(self, template: networks.Arcn, target: np.ndarray):
        self._arcn = template
        self._target = target
        outer = self

        class _ArcnProxy:
            cfg = template.cfg

            def frame_geometry(self, rate):
                return template.frame_geometry(rate)

            def forward(self, x_t, s_pred, s_inp, lossmap, step, rate):
                return Tensor(outer._target.copy())

        class _DparnProxy:
            def forward(self, s_inp):
                return Tensor(outer._target.copy())

        self.arcn = _ArcnProxy()
        self.dparn = _DparnProxy()


class _ZeroNoise:
    def standard_normal(self, n):
        return np.zeros(n)


class TestReverseInfer:
    def test_deterministic_and_shape(self):
        model = _tiny_model(seed=3)
        s_hr = speechlike(8000, seed=31)
        s_lr, _ = simulate_lr(s_hr, UpsamplingRatio(2))
        out1 = reverse_infer(s_lr, model, SCHED, UpsamplingRatio(2), "chebyshev",
                             np.random.default_rng(77))
        out2 = reverse_infer(s_lr, model, SCHED, UpsamplingRatio(2), "chebyshev",
                             np.random.default_rng(77))
        assert len(out1) == 2 * len(s_lr)
        assert out1.sample_rate == 16000
        np.testing.assert_array_equal(out1.samples, out2.samples)

    def test_rng_required(self):
        model = _tiny_model(seed=4)
        with pytest.raises(ValueError):
            reverse_infer(Waveform(np.zeros(100), 8000), model, SCHED,
                          UpsamplingRatio(2))

    def test_oracle_network_recovers_target_bands(self):
        """With zero noise and a perfect network, output matches s_hr per band."""
        s_hr = speechlike(16000, seed=32)
        s_lr, s_inp = simulate_lr(s_hr, UpsamplingRatio(2))
        template = networks.Arcn(networks.tiny_arcn_config(), np.random.default_rng(5))
        model = _OracleModel(template, s_hr.samples)
        out = reverse_infer(s_lr, model, SCHED, UpsamplingRatio(2), "chebyshev",
                            _ZeroNoise())
        low = band_lsd(s_inp, out, 0.0, 0.8 * 4000.0)
        high = band_lsd(s_hr, out, 1.2 * 4000.0, 8000.0)
        assert low < 0.3
        assert high < 0.3


class TestScheduleValidation:
    def test_bad_sigma_order_rejected(self):
        with pytest.raises(ValueError):
            NoiseSchedule(sigma_min=0.5, sigma_max=0.05)

    def test_bad_inference_steps_rejected(self):
        with pytest.raises(ValueError):
            NoiseSchedule(inference_steps=0)

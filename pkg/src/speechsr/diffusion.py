"""Conditional diffusion: noise schedule, sampling, training, inference.

The forward marginal has mean mu = e^(-gamma t) x0 + (1 - e^(-gamma t)) y
(y being the interpolated low-resolution input) and a closed-form variance
controlled by (sigma_min, sigma_max, gamma). Training teaches the
diffusion network to predict the clean signal directly at a uniformly
sampled step; inference starts from the predictive stage's output (shallow
diffusion) and stitches the known low band back in after every step
(repainting).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Waveform, n_frames_for
from .engine import Tensor, clip_global_norm, no_grad, ops
from .errors import NumericsError
from .networks import TwoStageModel
from .objectives import LossReport, lambda_weight, loss_pred, loss_tf
from .resample import UpsamplingRatio, build_lossmap, cubic_spline_upsample, resample_chain


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    gamma: float = 1.5
    total_steps: int = 1000
    inference_steps: int = 10

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 1 <= self.inference_steps <= self.total_steps:
            raise ValueError("inference_steps must lie in [1, total_steps]")


def sigma(t, sched: NoiseSchedule):
    """Noise standard deviation at continuous time t in [0, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError(f"diffusion time must lie in [0, 1], got {t}")
    ratio = sched.sigma_max / sched.sigma_min
    log_ratio = np.log(ratio)
    var = (sched.sigma_min**2
           * (ratio ** (2.0 * t_arr) - np.exp(-2.0 * sched.gamma * t_arr))
           * log_ratio / (sched.gamma + log_ratio))
    out = np.sqrt(np.maximum(var, 0.0))
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def mean_mu(x0: np.ndarray, y: np.ndarray, t: float, gamma: float) -> np.ndarray:
    """Closed-form forward mean: e^(-gamma t) x0 + (1 - e^(-gamma t)) y."""
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x0.shape != y.shape:
        raise ValueError(f"length mismatch: {x0.shape} vs {y.shape}")
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    decay = np.exp(-gamma * t)
    return decay * x0 + (1.0 - decay) * y


def forward_sample(x0: np.ndarray, y: np.ndarray, t: float, z: np.ndarray,
                   sched: NoiseSchedule) -> np.ndarray:
    """Draw x_t = mu(x0, y, t) + sigma(t) * z with caller-supplied noise."""
    z = np.asarray(z, dtype=np.float64)
    mu = mean_mu(x0, y, t, sched.gamma)
    if z.shape != mu.shape:
        raise ValueError(f"noise shape {z.shape} != signal shape {mu.shape}")
    return mu + sigma(t, sched) * z


def inference_time_grid(sched: NoiseSchedule) -> np.ndarray:
    """Uniformly spaced continuous times from (T-1)/T down to 0."""
    t_max = (sched.total_steps - 1) / sched.total_steps
    return np.linspace(t_max, 0.0, sched.inference_steps)


@dataclass(frozen=True)
class DiffusionState:
    """One reverse-loop iterate: clean estimate, noisy latent, current time."""

    x0: np.ndarray
    x_t: np.ndarray
    t: float

    def __post_init__(self):
        if self.x0.shape != self.x_t.shape:
            raise ValueError(f"length mismatch: {self.x0.shape} vs {self.x_t.shape}")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"diffusion time {self.t} outside [0, 1]")


def repaint(x0t: np.ndarray, s_inp: np.ndarray, sample_rate: int,
            ratio: UpsamplingRatio, kind: str = "chebyshev",
            zero_phase: bool = True) -> np.ndarray:
    """Keep the estimate's high band, replace its low band with s_inp.

    x0t' = s_inp + (x0t - Resample(x0t)).
    """
    x0t = np.asarray(x0t, dtype=np.float64)
    s_inp = np.asarray(s_inp, dtype=np.float64)
    if x0t.shape != s_inp.shape:
        raise ValueError(f"length mismatch: {x0t.shape} vs {s_inp.shape}")
    low = resample_chain(Waveform(x0t, sample_rate), ratio, kind, zero_phase=zero_phase)
    return s_inp + (x0t - low.samples)


@dataclass(frozen=True)
class StepLosses:
    """Per-step mean loss terms, plus the gradient scale actually applied."""

    report: LossReport
    clip_scale: float


def _utterance_loss(model: TwoStageModel, hr: np.ndarray, inp: np.ndarray,
                    sched: NoiseSchedule, ratio: UpsamplingRatio,
                    sample_rate: int, k: int, z: np.ndarray):
    """Loss graph for one utterance at integer diffusion step k."""
    t = k / sched.total_steps
    frame_len, hop = model.arcn.frame_geometry(sample_rate)
    s_pred = model.dparn.forward(Tensor(inp))
    x_t = forward_sample(hr, inp, t, z, sched)
    t_frames = n_frames_for(hr.size, frame_len, hop)
    lossmap = build_lossmap(t_frames, model.arcn.cfg.network_bins, ratio,
                            frame_len, sample_rate)
    s_hat = model.arcn.forward(x_t, s_pred, inp, lossmap.mask,
                               t * sched.total_steps, sample_rate)
    pre_re, pre_im = ops.stft_pair(s_pred, frame_len, hop)
    ref_re, ref_im = ops.stft_pair(Tensor(hr), frame_len, hop)
    l_pred = loss_pred(pre_re, pre_im, ref_re, ref_im)
    l_time, l_freq, l_diff = loss_tf(s_hat, hr, frame_len, hop)
    lam = lambda_weight(t)
    total = ops.add(l_pred, ops.mul(l_diff, lam))
    return total, LossReport.build(l_pred.item(), l_time.item(), l_freq.item(), lam)


def train_step(model: TwoStageModel, batch, sched: NoiseSchedule, opt, ema,
               rng: np.random.Generator, ratio: UpsamplingRatio,
               clip_norm: float = 1.0) -> StepLosses:
    """One joint gradient step over a batch (per-utterance accumulation).

    Each batch element draws its own diffusion step and noise; losses are
    averaged over the batch before the clipped Adam update and EMA refresh.
    Raises NumericsError on a non-finite loss, leaving gradients untouched
    for diagnosis.
    """
    opt.zero_grad()
    n_items = batch.hr.shape[0]
    reports = []
    for b in range(n_items):
        n_valid = int(batch.mask[b].sum())
        hr = batch.hr[b, :n_valid]
        inp = batch.inp[b, :n_valid]
        k = int(rng.integers(1, sched.total_steps + 1))
        z = rng.standard_normal(n_valid)
        total, report = _utterance_loss(model, hr, inp, sched, ratio,
                                        batch.sample_rate, k, z)
        if not np.isfinite(total.item()):
            raise NumericsError(
                f"non-finite loss on utterance {batch.ids[b]!r} at step k={k}"
            )
        ops.mul(total, 1.0 / n_items).backward()
        reports.append(report)

    scale = clip_global_norm(model.params(), clip_norm)
    opt.step()
    ema.update()
    mean = LossReport(
        *(float(np.mean([getattr(r, f) for r in reports]))
          for f in ("l_pred", "l_time", "l_freq", "l_diff", "lambda_weight", "total"))
    )
    return StepLosses(report=mean, clip_scale=scale)


def validation_loss(model: TwoStageModel, hr: np.ndarray, inp: np.ndarray,
                    sched: NoiseSchedule, ratio: UpsamplingRatio,
                    sample_rate: int, k: int, z: np.ndarray) -> LossReport:
    """Total loss on one utterance with a frozen (k, z) draw; no state change."""
    with no_grad():
        _, report = _utterance_loss(model, hr, inp, sched, ratio, sample_rate, k, z)
    return report


def reverse_infer(s_lr: Waveform, model: TwoStageModel, sched: NoiseSchedule,
                  ratio: UpsamplingRatio, kind: str = "chebyshev",
                  rng: np.random.Generator | None = None,
                  zero_phase: bool = True) -> Waveform:
    """Generate the super-resolved signal from a low-rate input.

    Shallow-diffusion initialization (start from the predictive estimate)
    followed by ``sched.inference_steps`` denoising steps, each repainted so
    the low band stays pinned to the interpolated input.
    """
    if rng is None:
        raise ValueError("reverse_infer needs an explicit Generator for determinism")
    s_inp = cubic_spline_upsample(s_lr, ratio)
    rate = s_inp.sample_rate
    n = len(s_inp)
    inp = s_inp.samples
    with no_grad():
        s_pred = model.dparn.forward(Tensor(inp)).data
        frame_len, hop = model.arcn.frame_geometry(rate)
        t_frames = n_frames_for(n, frame_len, hop)
        lossmap = build_lossmap(t_frames, model.arcn.cfg.network_bins, ratio,
                                frame_len, rate)
        state = DiffusionState(s_pred.copy(), s_pred.copy(), 1.0)
        for t in inference_time_grid(sched):
            z = rng.standard_normal(n)
            x_t = mean_mu(state.x0, inp, t, sched.gamma) + sigma(t, sched) * z
            x0 = model.arcn.forward(x_t, s_pred, inp, lossmap.mask,
                                    t * sched.total_steps, rate).data
            x0 = repaint(x0, inp, rate, ratio, kind, zero_phase=zero_phase)
            state = DiffusionState(x0, x_t, float(t))
    return Waveform(state.x0, rate)

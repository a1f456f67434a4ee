"""Loss functions for joint two-stage training and evaluation metrics.

The predictive loss is an L1 over magnitude, real, and imaginary STFT
differences; the diffusion loss mixes time-domain and magnitude L1 with a
fixed 0.85/0.15 weighting. Losses are means over valid cells only, so
zero-padded samples and the frames they spawn never contribute.

Metrics are plain float functions: scale-invariant SNR (projection form)
and the frame-averaged RMS log-power spectral distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Spectrogram, n_frames_for
from .engine import Tensor, ops
from .engine.tensor import as_tensor

ALPHA = 0.85          # time/frequency mix of the diffusion loss
LAMBDA_MAX = 100.0    # clamp for the diffusion-loss weight
LSD_EPS = 1e-8        # magnitude floor before squaring/log
SISNR_CAP_DB = 100.0  # reported stand-in for a zero-error estimate


@dataclass(frozen=True)
class LossReport:
    """Scalar view of one training step's loss terms."""

    l_pred: float
    l_time: float
    l_freq: float
    l_diff: float
    lambda_weight: float
    total: float

    @classmethod
    def build(cls, l_pred: float, l_time: float, l_freq: float,
              lambda_weight: float) -> "LossReport":
        l_diff = ALPHA * l_time + (1.0 - ALPHA) * l_freq
        return cls(l_pred, l_time, l_freq, l_diff, lambda_weight,
                   l_pred + lambda_weight * l_diff)


@dataclass(frozen=True)
class MetricReport:
    sisnr_db: float
    lsd_db: float

    def __post_init__(self):
        if self.lsd_db < 0:
            raise ValueError(f"LSD cannot be negative, got {self.lsd_db}")


def frame_mask_for(n_valid: int, n_total: int, frame_len: int, hop: int) -> np.ndarray:
    """1.0 for STFT frames that touch the valid prefix of a padded signal."""
    t_frames = n_frames_for(n_total, frame_len, hop)
    pad = frame_len - hop
    t = np.arange(t_frames)
    return (t * hop < pad + n_valid).astype(np.float64)


def _masked_mean(cells, mask_rows: np.ndarray | None, n_cols: int):
    """Mean over valid rows of a (T, F) tensor of per-cell values."""
    if mask_rows is None:
        return ops.mean_(cells.reshape(-1))
    m = Tensor(mask_rows.reshape(-1, 1))
    total = ops.sum_(ops.mul(cells, m))
    count = float(mask_rows.sum()) * n_cols
    if count == 0:
        raise ValueError("loss mask selects no cells")
    return ops.mul(total, 1.0 / count)


def loss_pred(sp_re, sp_im, s_re, s_im, frame_mask: np.ndarray | None = None) -> Tensor:
    """L1 of magnitude + real + imaginary differences, averaged per cell.

    Inputs are (T, F) tensors (or arrays) of STFT real/imaginary parts;
    ``frame_mask`` marks valid (non-padding) frames.
    """
    sp_re, sp_im = as_tensor(sp_re), as_tensor(sp_im)
    s_re, s_im = as_tensor(s_re), as_tensor(s_im)
    if sp_re.shape != s_re.shape or sp_im.shape != s_im.shape or sp_re.shape != sp_im.shape:
        raise ValueError("spectrogram shape mismatch")
    mag_p = ops.complex_magnitude(sp_re, sp_im)
    mag_s = ops.complex_magnitude(s_re, s_im)
    cells = ops.abs_(ops.sub(mag_p, mag_s))
    cells = ops.add(cells, ops.abs_(ops.sub(sp_re, s_re)))
    cells = ops.add(cells, ops.abs_(ops.sub(sp_im, s_im)))
    return _masked_mean(cells, frame_mask, sp_re.shape[1])


def loss_tf(s_hat, s_ref, frame_len: int, hop: int,
            sample_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Time L1 and STFT-magnitude L1, mixed as alpha*time + (1-alpha)*freq.

    Returns (l_time, l_freq, l_diff). ``sample_mask``, when given, must be a
    contiguous 0/1 prefix mask of the signal length.
    """
    s_hat, s_ref = as_tensor(s_hat), as_tensor(s_ref)
    if s_hat.shape != s_ref.shape:
        raise ValueError(f"length mismatch: {s_hat.shape} vs {s_ref.shape}")
    n = s_hat.shape[0]
    diff = ops.abs_(ops.sub(s_hat, s_ref))
    if sample_mask is None:
        l_time = ops.mean_(diff)
        frame_mask = None
    else:
        n_valid = int(sample_mask.sum())
        if n_valid == 0:
            raise ValueError("sample mask selects nothing")
        l_time = ops.mul(ops.sum_(ops.mul(diff, Tensor(sample_mask))), 1.0 / n_valid)
        frame_mask = frame_mask_for(n_valid, n, frame_len, hop)
    hre, him = ops.stft_pair(s_hat, frame_len, hop)
    rre, rim = ops.stft_pair(s_ref, frame_len, hop)
    cells = ops.abs_(ops.sub(ops.complex_magnitude(hre, him),
                             ops.complex_magnitude(rre, rim)))
    l_freq = _masked_mean(cells, frame_mask, cells.shape[1])
    l_diff = ops.add(ops.mul(l_time, ALPHA), ops.mul(l_freq, 1.0 - ALPHA))
    return l_time, l_freq, l_diff


def lambda_weight(t: float) -> float:
    """Diffusion-loss weight 1/(e^t - 1), clamped to LAMBDA_MAX."""
    if t <= 0:
        raise ValueError(f"lambda weight needs t > 0, got {t}")
    return min(1.0 / (np.expm1(t)), LAMBDA_MAX)


def sisnr(est: np.ndarray, ref: np.ndarray) -> float:
    """Scale-invariant SNR in dB (zero-mean, projection onto the reference)."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref = ref - ref.mean()
    est = est - est.mean()
    denom = float(np.dot(ref, ref))
    if denom == 0.0:
        raise ValueError("reference signal is zero")
    target = (np.dot(est, ref) / denom) * ref
    err = est - target
    err_pow = float(np.dot(err, err))
    tgt_pow = float(np.dot(target, target))
    if err_pow == 0.0:
        return SISNR_CAP_DB
    return min(10.0 * np.log10(tgt_pow / err_pow), SISNR_CAP_DB)


def lsd(ref: Spectrogram | np.ndarray, est: Spectrogram | np.ndarray) -> float:
    """Log-spectral distance: frame-averaged RMS of log10 power ratios."""
    a = ref.magnitude() if isinstance(ref, Spectrogram) else np.abs(ref)
    b = est.magnitude() if isinstance(est, Spectrogram) else np.abs(est)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = np.maximum(a, LSD_EPS)
    b = np.maximum(b, LSD_EPS)
    d = np.log10((a * a) / (b * b))
    return float(np.mean(np.sqrt(np.mean(d * d, axis=1))))

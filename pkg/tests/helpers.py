"""Shared test utilities: independent oracles and band-restricted spectra."""

import mpmath as mp
import numpy as np

from speechsr import dsp


def fd_gradient_check(build_loss, params, rng, n_probes=32, h=1e-5,
                      rtol=1e-4, atol=1e-7):
    """Compare backward gradients against central finite differences.

    ``build_loss`` must rebuild the (deterministic) scalar loss from the
    current parameter values on every call. Probes ``n_probes`` random
    coordinates across all parameters.
    """
    for p in params:
        p.grad = None
    build_loss().backward()
    grads = {
        p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for p in params
    }
    coords = [(p, i) for p in params for i in range(p.size)]
    take = min(n_probes, len(coords))
    chosen = rng.choice(len(coords), size=take, replace=False)
    worst = 0.0
    for j in chosen:
        p, i = coords[j]
        orig = p.data.flat[i]
        p.data.flat[i] = orig + h
        f_plus = build_loss().item()
        p.data.flat[i] = orig - h
        f_minus = build_loss().item()
        p.data.flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        ad = grads[p.name].flat[i]
        err = abs(ad - fd)
        tol = rtol * max(abs(ad), abs(fd)) + atol
        assert err <= tol, (
            f"gradient mismatch at {p.name}[{i}]: backward {ad!r} vs fd {fd!r}"
        )
        worst = max(worst, err / (max(abs(ad), abs(fd)) + atol))
    for p in params:
        p.grad = None
    return worst


def response_mp(filt, freqs_norm, dps=40):
    """High-precision |H| of an IirFilter on a grid of Nyquist fractions.

    Evaluates the biquad cascade in mpmath arithmetic, independent of the
    float64 path in ``IirFilter.response``.
    """
    out = []
    with mp.workdps(dps):
        for nu in freqs_norm:
            z = mp.expjpi(mp.mpf(nu))
            h = mp.mpc(filt.gain)
            for s in filt.sections:
                num = mp.mpc(s.b0) + mp.mpc(s.b1) / z + mp.mpc(s.b2) / z**2
                den = 1 + mp.mpc(s.a1) / z + mp.mpc(s.a2) / z**2
                h *= num / den
            out.append(float(abs(h)))
    return np.asarray(out)


def band_lsd(ref: dsp.Waveform, est: dsp.Waveform, f_lo: float, f_hi: float,
             cfg: dsp.FrameConfig = dsp.FrameConfig()) -> float:
    """Log-spectral distance restricted to bins with center freq in [f_lo, f_hi]."""
    s_ref = dsp.stft(ref, cfg)
    s_est = dsp.stft(est, cfg)
    centers = np.arange(s_ref.n_bins) * ref.sample_rate / s_ref.frame_len
    sel = (centers >= f_lo) & (centers <= f_hi)
    a = np.maximum(s_ref.magnitude()[:, sel], 1e-8)
    b = np.maximum(s_est.magnitude()[:, sel], 1e-8)
    d = np.log10(a**2 / b**2)
    return float(np.mean(np.sqrt(np.mean(d**2, axis=1))))


def band_energy_fraction(w: dsp.Waveform, f_lo: float) -> float:
    """Fraction of total spectral energy above ``f_lo`` Hz."""
    spec = np.fft.rfft(w.samples)
    freqs = np.fft.rfftfreq(len(w), d=1.0 / w.sample_rate)
    e = np.abs(spec) ** 2
    return float(e[freqs > f_lo].sum() / e.sum())


def speechlike(n: int, rate: int = 16000, seed: int = 0) -> dsp.Waveform:
    """Deterministic harmonic-plus-noise signal with a falling spectral tilt."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / rate
    f0 = 120.0 + 30.0 * np.sin(2 * np.pi * 1.7 * t)
    phase = 2 * np.pi * np.cumsum(f0) / rate
    x = np.zeros(n)
    for k in range(1, int(7000 / 160.0)):
        amp = 1.0 / (1.0 + (k * 130.0 / 900.0) ** 2) ** 0.5
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    spec *= 1.0 / (1.0 + (freqs / 2500.0) ** 2) ** 0.5
    x += 0.3 * np.fft.irfft(spec, n=n) / np.std(np.fft.irfft(spec, n=n))
    x /= np.std(x)
    return dsp.Waveform(x, rate)

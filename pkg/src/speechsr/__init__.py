"""Two-stage speech super-resolution: predictive enhancement + diffusion."""

__version__ = "0.1.0"

from .dsp import FrameConfig, Spectrogram, Waveform  # noqa: E402,F401

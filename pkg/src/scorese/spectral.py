"""Time-frequency analysis and synthesis.

Waveforms are mono float64 arrays at a fixed pipeline rate of 16 kHz.
Spectrograms are complex F-by-K matrices from a windowed FFT: the signal is
front-padded by ``window_len - hop`` and tail-padded with zeros so that every
sample sits under the full overlap of analysis windows, the Nyquist bin is
dropped (F = window_len // 2) and restored as zero on synthesis, and an
optional invertible magnitude compression ``scale * |b|**p * exp(i*arg(b))``
is applied per bin.  The inverse divides the overlap-added frames by the
accumulated squared window, which reconstructs the input exactly (to float64
precision) for any window/hop whose squared-window sum is positive over the
signal, then trims to the requested length.

Frame count for an n-sample input: ``K = ceil((n + window_len - hop) / hop)``.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PIPELINE_SAMPLE_RATE = 16000

_WINDOWS = ("hann", "rect")


@dataclass(frozen=True)
class Waveform:
    """Mono time-domain signal: float64 samples, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = PIPELINE_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis settings.

    Defaults: 512-sample Hann window, hop 128 (75% overlap), magnitude
    compression ``0.15 * |b|**0.5`` enabled.
    """

    window_len: int = 512
    hop: int = 128
    window: str = "hann"
    compression_exponent: float = 0.5
    compression_scale: float = 0.15
    compression_enabled: bool = True

    def __post_init__(self):
        if self.window_len < 2 or (self.window_len & (self.window_len - 1)) != 0:
            raise ValueError(f"window_len must be a power of two >= 2, got {self.window_len}")
        if not (1 <= self.hop <= self.window_len):
            raise ValueError(f"hop must be in [1, window_len], got {self.hop}")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}, expected one of {_WINDOWS}")
        if not (0.0 < self.compression_exponent <= 1.0):
            raise ValueError("compression_exponent must be in (0, 1] so compression stays invertible")
        if self.compression_scale <= 0.0:
            raise ValueError("compression_scale must be positive")

    @property
    def n_bins(self) -> int:
        """Frequency bins kept per frame (Nyquist dropped)."""
        return self.window_len // 2

    def frame_count(self, n_samples: int) -> int:
        """Frames covering an n-sample signal under the padded framing rule."""
        if n_samples < 1:
            raise ValueError("n_samples must be positive")
        pad = self.window_len - self.hop
        return -(-(n_samples + pad) // self.hop)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """F-by-K complex TF matrix plus the source length needed for synthesis."""

    bins: np.ndarray
    n_samples: int

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 2:
            raise ValueError(f"bins must be 2-D (freq, frame), got shape {bins.shape}")
        if not np.all(np.isfinite(bins)):
            raise ValueError("spectrogram bins must be finite")
        object.__setattr__(self, "bins", bins)

    @property
    def n_freqs(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


def _window_taper(cfg: StftConfig) -> np.ndarray:
    n = cfg.window_len
    if cfg.window == "hann":
        # periodic Hann: the lag-N/4 shifts tile to a constant squared sum
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    return np.ones(n)


def compress_magnitude(bins: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Apply ``scale * |b|**p * exp(i*arg b)`` per bin (zero maps to zero)."""
    mag = np.abs(bins)
    phase = np.where(mag > 0.0, bins / np.where(mag > 0.0, mag, 1.0), 0.0)
    return cfg.compression_scale * mag**cfg.compression_exponent * phase


def decompress_magnitude(bins: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Exact inverse of :func:`compress_magnitude` on magnitudes."""
    mag = np.abs(bins) / cfg.compression_scale
    phase = np.where(mag > 0.0, bins / np.where(np.abs(bins) > 0.0, np.abs(bins), 1.0), 0.0)
    return mag ** (1.0 / cfg.compression_exponent) * phase


def _padded(w: Waveform, cfg: StftConfig) -> tuple[np.ndarray, int, int]:
    n = len(w)
    pad = cfg.window_len - cfg.hop
    k = cfg.frame_count(n)
    total = (k - 1) * cfg.hop + cfg.window_len
    out = np.zeros(total)
    out[pad : pad + n] = w.samples
    return out, pad, k


def stft(w: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    """Windowed FFT of ``w``; returns F = window_len//2 bins per frame.

    Raises ValueError on an empty waveform.
    """
    if len(w) == 0:
        raise ValueError("cannot take the STFT of an empty waveform")
    padded, _, k = _padded(w, cfg)
    frames = sliding_window_view(padded, cfg.window_len)[:: cfg.hop]
    assert frames.shape[0] == k
    spec = np.fft.rfft(frames * _window_taper(cfg), axis=1)
    bins = np.ascontiguousarray(spec[:, : cfg.n_bins].T)
    if cfg.compression_enabled:
        bins = compress_magnitude(bins, cfg)
    return ComplexSpectrogram(bins, len(w))


def istft(s: ComplexSpectrogram, cfg: StftConfig, out_len: int) -> Waveform:
    """Overlap-add inverse of :func:`stft`, trimmed to ``out_len`` samples.

    Raises ValueError if the window/hop combination leaves any needed sample
    position with zero squared-window coverage (non-invertible framing).
    """
    if out_len < 1:
        raise ValueError("out_len must be positive")
    if s.n_freqs != cfg.n_bins:
        raise ValueError(f"spectrogram has {s.n_freqs} bins but config expects {cfg.n_bins}")
    bins = s.bins
    if cfg.compression_enabled:
        bins = decompress_magnitude(bins, cfg)
    full = np.vstack([bins, np.zeros((1, s.n_frames))])  # Nyquist restored as zero
    frames = np.fft.irfft(full.T, n=cfg.window_len, axis=1)

    win = _window_taper(cfg)
    k = s.n_frames
    total = (k - 1) * cfg.hop + cfg.window_len
    acc = np.zeros(total)
    wsum = np.zeros(total)
    weighted = frames * win
    for i in range(k):
        lo = i * cfg.hop
        acc[lo : lo + cfg.window_len] += weighted[i]
        wsum[lo : lo + cfg.window_len] += win**2

    pad = cfg.window_len - cfg.hop
    needed = wsum[pad : pad + out_len]
    if needed.size < out_len or np.any(needed <= 1e-12):
        raise ValueError(
            "window/hop combination does not cover every sample "
            "(squared-window sum vanishes); use an overlapping tapered window"
        )
    out = acc[pad : pad + out_len] / needed
    return Waveform(out)


def wav_read(path, expected_rate: int = PIPELINE_SAMPLE_RATE) -> Waveform:
    """Read a mono 16-bit PCM WAV file at the pipeline rate."""
    with wave.open(str(path), "rb") as f:
        channels = f.getnchannels()
        width = f.getsampwidth()
        rate = f.getframerate()
        n = f.getnframes()
        raw = f.readframes(n)
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: expected {expected_rate} Hz, got {rate} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def wav_write(path, w: Waveform) -> None:
    """Write a waveform as mono 16-bit PCM, clipping to [-1, 1]."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())

"""WAV input, log mel filterbank features and sinusoidal positional encoding.

Framing convention: frames of ``win_ms`` start every ``hop_ms`` and must lie
entirely inside the signal (no padding), so an utterance of ``N`` samples
yields ``floor((N - win) / hop) + 1`` frames and a prefix of an utterance
yields exactly the leading frames of the full utterance.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

__all__ = [
    "FeatureMatrix",
    "WavFormatError",
    "WaveBuffer",
    "extract_features",
    "filter_centers_hz",
    "frame_count",
    "hz_to_mel",
    "log_mel_fbank",
    "mel_filterbank",
    "mel_to_hz",
    "read_wav",
    "sinusoidal_pos_encoding",
    "write_wav",
]

LOG_FLOOR = 1e-10
DEFAULT_RATE = 8000


class WavFormatError(ValueError):
    """The file is not 16-bit PCM mono WAV (or the rate is unexpected)."""


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("wave buffer must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("wave buffer contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n_filters, T)
    frame_hop_ms: float = 10.0
    frame_win_ms: float = 25.0

    @property
    def n_filters(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def read_wav(path) -> WaveBuffer:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: unsupported WAV encoding ({exc})") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: unsupported channel count {channels} (mono required)")
    if width != 2:
        raise WavFormatError(f"{path}: unsupported sample width {8 * width} bits (16-bit PCM required)")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise WavFormatError(f"{path}: no samples")
    return WaveBuffer(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = DEFAULT_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM mono (inverse of ``read_wav`` scaling)."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def _fft_size(win: int) -> int:
    return 1 << (win - 1).bit_length()


def frame_count(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


@lru_cache(maxsize=16)
def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (n_filters, n_fft//2 + 1) equally spaced on the mel scale from 0 to Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (center - lo)
    falling = (hi - bins) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def filter_centers_hz(n_filters: int, sample_rate: int) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2))[1:-1]


def log_mel_fbank(
    w: WaveBuffer,
    n_filters: int = 80,
    win_ms: float = 25.0,
    hop_ms: float = 10.0,
    normalize: bool = False,
) -> FeatureMatrix:
    """Log magnitude mel filterbank: Hann window, FFT of the next power of two, floor 1e-10.

    ``normalize`` subtracts the per-filter mean and divides by the standard
    deviation over frames (off by default).
    """
    sr = w.sample_rate
    win = int(round(sr * win_ms / 1000.0))
    hop = int(round(sr * hop_ms / 1000.0))
    n = frame_count(w.samples.size, win, hop)
    if n < 1:
        raise ValueError(f"utterance of {w.samples.size} samples is shorter than one {win}-sample window")
    n_fft = _fft_size(win)
    starts = np.arange(n) * hop
    frames = w.samples[starts[:, None] + np.arange(win)]
    spec = np.abs(np.fft.rfft(frames * np.hanning(win), n=n_fft, axis=1))
    # einsum keeps each frame's sum independent of the frame count (BLAS does not),
    # so a prefix of the audio gives bit-identical leading frames
    energies = np.einsum("tf,mf->tm", spec, mel_filterbank(n_filters, n_fft, sr))
    values = np.log(np.maximum(energies, LOG_FLOOR)).T
    if normalize:
        values = (values - values.mean(axis=1, keepdims=True)) / (values.std(axis=1, keepdims=True) + 1e-8)
    return FeatureMatrix(np.ascontiguousarray(values), frame_hop_ms=hop_ms, frame_win_ms=win_ms)


def extract_features(path, n_filters: int = 80, sample_rate: int = DEFAULT_RATE, normalize: bool = False) -> FeatureMatrix:
    """``read_wav`` then ``log_mel_fbank``, rejecting files at another rate."""
    w = read_wav(path)
    if w.sample_rate != sample_rate:
        raise WavFormatError(f"{path}: sample rate {w.sample_rate} Hz, expected {sample_rate} Hz")
    return log_mel_fbank(w, n_filters=n_filters, normalize=normalize)


def sinusoidal_pos_encoding(T: int, C: int, dtype=np.float64) -> np.ndarray:
    """Interleaved sine/cosine encoding, shape (C, T).

    Channel ``2i`` holds ``sin(t / 10000^(2i/C))`` and channel ``2i+1`` the
    matching cosine.
    """
    if C % 2:
        raise ValueError(f"positional encoding needs an even channel count, got {C}")
    if T < 1:
        raise ValueError(f"positional encoding needs T >= 1, got {T}")
    pos = np.arange(T, dtype=np.float64)[None, :]
    freq = np.exp(-np.log(10000.0) * np.arange(0, C, 2, dtype=np.float64) / C)[:, None]
    pe = np.empty((C, T), dtype=np.float64)
    pe[0::2] = np.sin(pos * freq)
    pe[1::2] = np.cos(pos * freq)
    return pe.astype(dtype)

"""Time-frequency analysis/synthesis and SNR-controlled mixing."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .validation import atomic_write, check_finite

DEFAULT_SAMPLE_RATE = 8000


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        check_finite(self.samples, "waveform samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def power(self) -> float:
        return float(np.mean(self.samples**2)) if len(self) else 0.0


@dataclass(frozen=True)
class StftConfig:
    window_length_ms: float = 400.0
    hop_length_ms: float = 200.0
    window: str = "hamming"
    fft_size: int | None = None

    def __post_init__(self):
        if self.window_length_ms <= 0 or self.hop_length_ms <= 0:
            raise ValueError("window and hop lengths must be positive")
        if self.hop_length_ms > self.window_length_ms:
            raise ValueError("hop must not exceed the window length")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_length_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_length_ms * sample_rate / 1000.0))

    def n_fft(self, sample_rate: int) -> int:
        win = self.window_samples(sample_rate)
        n_fft = win if self.fft_size is None else int(self.fft_size)
        if n_fft < win:
            raise ValueError(f"fft_size {n_fft} is shorter than the window ({win} samples)")
        return n_fft

    def n_bins(self, sample_rate: int) -> int:
        return self.n_fft(sample_rate) // 2 + 1

    def get_window(self, sample_rate: int) -> np.ndarray:
        # periodic (DFT-even) window; synthesis divides by the summed squared window
        return sps.get_window(self.window, self.window_samples(sample_rate), fftbins=True)

    def n_frames(self, n_samples: int, sample_rate: int) -> int:
        win = self.window_samples(sample_rate)
        hop = self.hop_samples(sample_rate)
        if n_samples <= win:
            return 1
        return int(math.ceil((n_samples - win) / hop)) + 1


FULL_STFT = StftConfig()
DESK_STFT = StftConfig(window_length_ms=32.0, hop_length_ms=16.0)


@dataclass
class Spectrogram:
    """Complex STFT matrix of shape ``(I, J)`` with the metadata needed to invert it."""

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE
    length: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise ValueError(f"spectrogram values must be 2-D, got shape {self.values.shape}")
        check_finite(self.values, "spectrogram values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def phase(self) -> np.ndarray:
        return np.angle(self.values)

    def with_values(self, values: np.ndarray) -> "Spectrogram":
        return Spectrogram(values, self.config, self.sample_rate, self.length)


def stft(w: Waveform, cfg: StftConfig = FULL_STFT) -> Spectrogram:
    """Frame ``w`` without centering; the last partial frame is zero padded."""
    if len(w) == 0:
        raise ValueError("cannot take the STFT of an empty waveform")
    sr = w.sample_rate
    win_len = cfg.window_samples(sr)
    hop = cfg.hop_samples(sr)
    n_fft = cfg.n_fft(sr)
    if win_len < 1 or hop < 1:
        raise ValueError(f"config yields window={win_len}, hop={hop} samples at {sr} Hz")
    window = cfg.get_window(sr)
    n_frames = cfg.n_frames(len(w), sr)
    padded = np.zeros((n_frames - 1) * hop + win_len)
    padded[: len(w)] = w.samples
    idx = np.arange(win_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * window
    values = np.fft.rfft(frames, n=n_fft, axis=1).T
    return Spectrogram(values, cfg, sr, len(w))


def istft(s: Spectrogram, length: int | None = None) -> Waveform:
    """Weighted overlap-add with sum-of-squared-window normalisation."""
    if s.n_frames == 0:
        raise ValueError("spectrogram has no frames")
    check_finite(s.values, "spectrogram values")
    cfg, sr = s.config, s.sample_rate
    win_len = cfg.window_samples(sr)
    hop = cfg.hop_samples(sr)
    n_fft = cfg.n_fft(sr)
    if s.n_bins != n_fft // 2 + 1:
        raise ValueError(f"expected {n_fft // 2 + 1} bins, got {s.n_bins}")
    window = cfg.get_window(sr)
    frames = np.fft.irfft(s.values.T, n=n_fft, axis=1)[:, :win_len] * window
    total = (s.n_frames - 1) * hop + win_len
    out = np.zeros(total)
    norm = np.zeros(total)
    for j in range(s.n_frames):
        out[j * hop : j * hop + win_len] += frames[j]
        norm[j * hop : j * hop + win_len] += window**2
    nonzero = norm > 1e-10
    out[nonzero] /= norm[nonzero]
    length = length if length is not None else s.length
    if length is not None:
        out = out[:length] if length <= total else np.pad(out, (0, length - total))
    return Waveform(out, sr)


def mix_at_snr(
    target: Waveform, interferer: Waveform, snr_db: float
) -> tuple[Waveform, Waveform]:
    """Scale ``interferer`` to sit ``snr_db`` below ``target`` and add them.

    Both signals are truncated to the shorter length first. Returns the
    mixture and the scaled interferer; the target itself is used unscaled.
    """
    if target.sample_rate != interferer.sample_rate:
        raise ValueError(
            f"sample rates differ: {target.sample_rate} vs {interferer.sample_rate}"
        )
    n = min(len(target), len(interferer))
    t = target.samples[:n]
    i = interferer.samples[:n]
    p_t = float(np.mean(t**2)) if n else 0.0
    p_i = float(np.mean(i**2)) if n else 0.0
    if p_t <= 0.0 or p_i <= 0.0:
        raise ValueError("SNR is undefined for a silent input")
    gain = math.sqrt(p_t / (p_i * 10.0 ** (snr_db / 10.0)))
    scaled = gain * i
    return Waveform(t + scaled, target.sample_rate), Waveform(scaled, target.sample_rate)


def snr_db(reference: np.ndarray, other: np.ndarray) -> float:
    return 10.0 * math.log10(np.mean(np.square(reference)) / np.mean(np.square(other)))


def resample(w: Waveform, sample_rate: int) -> Waveform:
    if w.sample_rate == sample_rate:
        return w
    g = math.gcd(int(w.sample_rate), int(sample_rate))
    y = sps.resample_poly(w.samples, sample_rate // g, w.sample_rate // g)
    return Waveform(y, sample_rate)


def read_wav(path: str | Path, sample_rate: int | None = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read 16-bit PCM mono WAV, resampling to ``sample_rate`` unless it is None."""
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        n_channels = f.getnchannels()
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels != 1:
        raise ValueError(f"{path}: expected mono audio, got {n_channels} channels")
    w = Waveform(data, rate)
    return w if sample_rate is None else resample(w, sample_rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with atomic_write(path) as fh, wave.open(fh, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())

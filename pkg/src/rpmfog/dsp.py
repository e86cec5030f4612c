"""Log-mel feature extraction: one-second clip in, 2-D time-frequency grid out.

All functions are pure and deterministic, so batch extraction can run in
parallel without coordination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import AudioClip


class ClipTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class DspConfig:
    frame_len: int = 400  # 25 ms at 16 kHz
    hop: int = 160  # 10 ms
    n_fft: int = 512
    n_mels: int = 40
    f_min: float = 20.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    sample_rate: int = 16000

    def __post_init__(self):
        if self.frame_len > self.n_fft:
            raise ValueError("frame_len must not exceed n_fft")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if self.n_mels < 2:
            raise ValueError("n_mels must be >= 2")

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            raise ClipTooShortError(f"clip of {n_samples} samples is shorter than one frame ({self.frame_len})")
        return 1 + (n_samples - self.frame_len) // self.hop


@dataclass(frozen=True)
class FeatureMap:
    """Log-mel energies, mel bins down the rows, analysis frames across columns."""

    values: np.ndarray  # (n_mels, n_frames)

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_signal(samples, config: DspConfig) -> np.ndarray:
    """Slice into overlapping Hamming-windowed frames, zero-padded to n_fft.

    Returns an array of shape (n_frames, n_fft).
    """
    x = np.asarray(samples, dtype=np.float64)
    n = config.n_frames(len(x))
    window = np.hamming(config.frame_len)
    frames = np.zeros((n, config.n_fft), dtype=np.float64)
    for i in range(n):
        start = i * config.hop
        frames[i, : config.frame_len] = x[start : start + config.frame_len] * window
    return frames


def power_spectrum(frame) -> np.ndarray:
    """|DFT|^2 / n for the one-sided spectrum of a length-n frame."""
    frame = np.asarray(frame, dtype=np.float64)
    n = len(frame)
    spec = np.fft.rfft(frame)
    return (spec.real**2 + spec.imag**2) / n


def mel_filterbank(config: DspConfig) -> np.ndarray:
    """Triangular filters, apexes equally spaced on the mel scale.

    Rows are filters, columns FFT bins (n_fft/2 + 1). Triangles are left
    unnormalized so adjacent filters sum to one between their apexes.
    """
    n_bins = config.n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * config.sample_rate / config.n_fft
    bin_mels = hz_to_mel(bin_freqs)
    mel_points = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2)
    fb = np.zeros((config.n_mels, n_bins), dtype=np.float64)
    for m in range(config.n_mels):
        lower, center, upper = mel_points[m], mel_points[m + 1], mel_points[m + 2]
        up = (bin_mels - lower) / (center - lower)
        down = (upper - bin_mels) / (upper - center)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def filter_center_freqs(config: DspConfig) -> np.ndarray:
    """Apex frequency of each filter, in Hz."""
    mel_points = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2)
    return mel_to_hz(mel_points[1:-1])


def log_mel_features(clip: AudioClip, config: DspConfig | None = None) -> FeatureMap:
    """Full pipeline: frame, power spectrum, mel filter, floor, log."""
    config = config or DspConfig()
    x = np.asarray(clip.samples, dtype=np.float64) / 32768.0
    frames = frame_signal(x, config)
    spectra = np.array([power_spectrum(f) for f in frames])  # (n_frames, n_bins)
    fb = mel_filterbank(config)
    energies = spectra @ fb.T  # (n_frames, n_mels)
    values = np.log(np.maximum(energies, config.log_floor)).T
    return FeatureMap(values=values)


def export_feature_csv(fm: FeatureMap, path):
    """Debug dump: one mel bin per line, one analysis frame per column."""
    with open(path, "w") as fh:
        for row in fm.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_feature_csv(path) -> FeatureMap:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return FeatureMap(values=np.array(rows, dtype=np.float64))

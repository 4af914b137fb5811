"""Audio front-end: resampling and the Log-Mel spectrogram.

A one second clip at 16 kHz becomes a 201x64 matrix: Hann window of 160
samples zero-padded to a 256-point FFT, hop 80, reflection padding of half
the FFT size on each side, power spectrum, 64 HTK mel bands over 0-8 kHz,
then ``log(x + 1e-10)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal

from .data import AudioClip
from .errors import DomainError, ShapeError

SAMPLE_RATE = 16000
DURATION_S = 1.0
WIN_LENGTH = 160
HOP_LENGTH = 80
N_FFT = 256
N_MELS = 64
F_MIN = 0.0
F_MAX = 8000.0
LOG_EPS = 1e-10


@dataclass
class Spectrogram:
    values: np.ndarray  # (T, F)
    sample_rate: int = SAMPLE_RATE
    window: int = WIN_LENGTH
    hop: int = HOP_LENGTH

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _as_clip(clip):
    # Accept an AudioClip-like object or a raw (samples, rate) tuple.
    if isinstance(clip, tuple):
        return np.asarray(clip[0], dtype=np.float64), int(clip[1])
    return np.asarray(clip.samples, dtype=np.float64), int(clip.sample_rate)


def resample(clip, target_rate: int):
    """Band-limited polyphase resampling to ``target_rate``.

    Returns an object of the same kind as ``clip``. The output length is
    ``round(len(samples) * target_rate / sample_rate)``.
    """
    if target_rate <= 0:
        raise DomainError(f"target_rate must be positive, got {target_rate}")
    samples, rate = _as_clip(clip)
    if samples.size == 0:
        raise DomainError("cannot resample an empty clip")
    n_out = int(round(samples.size * target_rate / rate))
    if target_rate == rate:
        out = samples.copy()
    else:
        g = gcd(int(target_rate), rate)
        out = signal.resample_poly(samples, target_rate // g, rate // g)
        if out.size >= n_out:
            out = out[:n_out]
        else:
            out = np.pad(out, (0, n_out - out.size))
    if isinstance(clip, tuple):
        return out, int(target_rate)
    return AudioClip(
        samples=out,
        sample_rate=int(target_rate),
        duration_s=out.size / target_rate,
        class_id=clip.class_id,
    )


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Centre frequency (Hz) of each triangular HTK mel filter."""
    mel_pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


@lru_cache(maxsize=8)
def mel_filterbank(
    sample_rate: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    n_mels: int = N_MELS,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
) -> np.ndarray:
    """Triangular HTK mel filterbank of shape (n_mels, n_fft // 2 + 1).

    Filters are unnormalised (peak weight 1). Filters narrower than the FFT
    bin spacing at the bottom of the range can end up empty; their output is
    the log floor.
    """
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    hz_pts = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    fb = np.zeros((n_mels, fft_freqs.size))
    for m in range(n_mels):
        lo, c, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / (c - lo)
        down = (hi - fft_freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=4)
def _padded_window(win_length: int, n_fft: int) -> np.ndarray:
    win = signal.get_window("hann", win_length, fftbins=True)
    left = (n_fft - win_length) // 2
    out = np.zeros(n_fft)
    out[left : left + win_length] = win
    out.setflags(write=False)
    return out


def power_stft(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP_LENGTH, win_length: int = WIN_LENGTH) -> np.ndarray:
    """Centered power STFT, shape (frames, n_fft // 2 + 1)."""
    x = np.pad(np.asarray(samples, dtype=np.float64), n_fft // 2, mode="reflect")
    n_frames = 1 + (x.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * _padded_window(win_length, n_fft)
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def log_mel(clip) -> Spectrogram:
    """Log-Mel spectrogram of a canonical 1 s, 16 kHz clip; shape (201, 64)."""
    samples, rate = _as_clip(clip)
    if rate != SAMPLE_RATE:
        raise DomainError(f"log_mel expects {SAMPLE_RATE} Hz audio, got {rate}")
    expected = int(round(SAMPLE_RATE * DURATION_S))
    if samples.size != expected:
        raise DomainError(f"log_mel expects {expected} samples, got {samples.size}")
    power = power_stft(samples)
    mel = power @ mel_filterbank().T
    values = np.log(mel + LOG_EPS)
    if not np.all(np.isfinite(values)):
        raise DomainError("non-finite audio samples")
    return Spectrogram(values=values)


# Spectrogram cache: two little-endian uint32 (rows, cols) then float32 data.

def save_spectrogram(path, spec) -> None:
    values = np.asarray(spec.values if isinstance(spec, Spectrogram) else spec)
    if values.ndim != 2:
        raise ShapeError(f"expected a 2-D spectrogram, got shape {values.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *values.shape))
        fh.write(values.astype("<f4").tobytes())


def load_spectrogram(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    rows, cols = struct.unpack("<II", raw[:8])
    data = np.frombuffer(raw, dtype="<f4", offset=8)
    if data.size != rows * cols:
        raise ShapeError(f"{path}: header says {rows}x{cols}, payload has {data.size} values")
    return data.reshape(rows, cols).astype(np.float32)


def n_frames(n_samples: int = SAMPLE_RATE, hop: int = HOP_LENGTH) -> int:
    return n_samples // hop + 1


def mel_bin_of(freq_hz: float) -> int:
    """Index of the mel filter responding most strongly to ``freq_hz``."""
    centers = mel_center_frequencies()
    return int(np.argmin(np.abs(centers - freq_hz)))


"""Signal-processing kernels: resampling, STFT/ISTFT, Griffin-Lim, pitch shifting.

Everything here is plain numpy/scipy and side-effect free. Spectrograms are
stored frame-major, i.e. ``values.shape == (T, F)`` with ``F = n_fft // 2 + 1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal
from scipy.io import wavfile

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000


class ConfigError(ValueError):
    """Raised for inconsistent STFT parameters."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono, got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 2048
    win_length: int = 1024
    hop_length: int = 160
    window: str = "hann"
    center_pad: bool = True

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise ConfigError(
                f"need 0 < hop_length <= win_length <= n_fft, got "
                f"hop={self.hop_length} win={self.win_length} n_fft={self.n_fft}"
            )

    @property
    def n_freqs(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if self.center_pad:
            return 1 + n_samples // self.hop_length
        return 1 + max(n_samples - self.n_fft, 0) // self.hop_length

    def fft_window(self) -> np.ndarray:
        """Analysis window zero-padded (centred) to ``n_fft``."""
        win = signal.get_window(self.window, self.win_length, fftbins=True)
        left = (self.n_fft - self.win_length) // 2
        out = np.zeros(self.n_fft)
        out[left:left + self.win_length] = win
        return out


# 1024-sample Hann, 10 ms hop at 16 kHz, zero-padded to 2048 bins
DEFAULT_STFT = StftConfig(n_fft=2048, win_length=1024, hop_length=160)


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT, ``values`` shaped (T, F).

    ``length`` is the source signal length, needed to undo centre padding exactly.
    """

    values: np.ndarray
    config: StftConfig = DEFAULT_STFT
    length: int | None = None

    @property
    def magnitude(self) -> "MagSpectrogram":
        return MagSpectrogram(np.abs(self.values), self.config, self.length)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.values)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class MagSpectrogram:
    values: np.ndarray
    config: StftConfig = DEFAULT_STFT
    length: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(v < 0):
            raise ValueError("magnitude spectrogram must be nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


ComplexSpectrogram = Spectrogram


# --------------------------------------------------------------------------
# pitch <-> frequency
# --------------------------------------------------------------------------

def hz_to_midi(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f <= 0):
        raise ValueError("frequency must be positive")
    out = 69.0 + 12.0 * np.log2(f / 440.0)
    return float(out) if out.ndim == 0 else out


def midi_to_hz(n):
    n = np.asarray(n, dtype=np.float64)
    out = 440.0 * 2.0 ** ((n - 69.0) / 12.0)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase band-limited resampling to ``target_rate``."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if len(w) == 0:
        raise ValueError("empty waveform")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(int(target_rate), int(w.sample_rate))
    out = signal.resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(out, int(target_rate))


# --------------------------------------------------------------------------
# STFT
# --------------------------------------------------------------------------

def _check_nola(cfg: StftConfig, n_frames: int):
    win_sq = cfg.fft_window() ** 2
    nz = np.flatnonzero(win_sq > 0)
    span = nz[-1] - nz[0] + 1
    # the overlapped sum of squared windows must not vanish inside the support
    if n_frames > 1 and cfg.hop_length > span:
        raise ConfigError("window/hop combination leaves gaps (NOLA violated)")
    probe = np.zeros(cfg.n_fft + 4 * cfg.hop_length * ((cfg.n_fft // cfg.hop_length) + 1))
    for start in range(0, probe.size - cfg.n_fft + 1, cfg.hop_length):
        probe[start:start + cfg.n_fft] += win_sq
    lo, hi = cfg.n_fft, probe.size - cfg.n_fft
    if hi > lo and probe[lo:hi].min() < 1e-10:
        raise ConfigError("window/hop combination violates NOLA")


def _frame(y: np.ndarray, cfg: StftConfig) -> np.ndarray:
    frames = sliding_window_view(y, cfg.n_fft)[:: cfg.hop_length]
    return frames


def _stft_raw(y: np.ndarray, cfg: StftConfig) -> np.ndarray:
    frames = _frame(y, cfg) * cfg.fft_window()
    return np.fft.rfft(frames, n=cfg.n_fft, axis=-1)


def _istft_raw(values: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Least-squares inverse of :func:`_stft_raw` (the padded-domain projection)."""
    win = cfg.fft_window()
    n_frames = values.shape[0]
    out_len = cfg.n_fft + cfg.hop_length * (n_frames - 1)
    frames = np.fft.irfft(values, n=cfg.n_fft, axis=-1) * win
    y = np.zeros(out_len)
    norm = np.zeros(out_len)
    win_sq = win ** 2
    for t in range(n_frames):
        s = t * cfg.hop_length
        y[s:s + cfg.n_fft] += frames[t]
        norm[s:s + cfg.n_fft] += win_sq
    covered = norm > 1e-10
    y[covered] /= norm[covered]
    y[~covered] = 0.0
    return y


def _pad(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    if cfg.center_pad:
        p = cfg.n_fft // 2
        mode = "reflect" if x.size > 1 else "constant"
        return np.pad(x, (p, p), mode=mode)
    if x.size < cfg.n_fft:
        return np.pad(x, (0, cfg.n_fft - x.size))
    return x


def stft(w: Waveform | np.ndarray, cfg: StftConfig = DEFAULT_STFT) -> Spectrogram:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty waveform")
    if not cfg.center_pad and x.size < cfg.win_length:
        raise ValueError("signal shorter than one window")
    y = _pad(x, cfg)
    spec = _stft_raw(y, cfg)
    expected = cfg.n_frames(x.size)
    return Spectrogram(spec[:expected], cfg, x.size)


def istft(s: Spectrogram, length: int | None = None, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    cfg = s.config
    values = np.asarray(s.values)
    _check_nola(cfg, values.shape[0])
    y = _istft_raw(values, cfg)
    length = length if length is not None else s.length
    if cfg.center_pad:
        p = cfg.n_fft // 2
        y = y[p:]
    if length is None:
        length = (values.shape[0] - 1) * cfg.hop_length
    if y.size < length:
        y = np.pad(y, (0, length - y.size))
    return Waveform(y[:length], sample_rate)


def spectral_convergence(mag: np.ndarray, target: np.ndarray) -> float:
    denom = np.linalg.norm(target)
    if denom == 0:
        return float(np.linalg.norm(mag))
    return float(np.linalg.norm(mag - target) / denom)


def griffin_lim(
    m: MagSpectrogram | np.ndarray,
    n_iters: int = 60,
    cfg: StftConfig | None = None,
    length: int | None = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    init_phase: np.ndarray | None = None,
    return_errors: bool = False,
):
    """Classic Griffin-Lim phase retrieval (no momentum).

    Iterates in the centre-padded signal domain, where the least-squares ISTFT
    is an exact projection, so the spectral-convergence error never increases.
    With ``return_errors`` the per-iteration error list is returned as well.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if isinstance(m, MagSpectrogram):
        cfg = cfg or m.config
        length = length if length is not None else m.length
        mag = m.values
    else:
        mag = np.asarray(m, dtype=np.float64)
        if np.any(mag < 0):
            raise ValueError("magnitude must be nonnegative")
    cfg = cfg or DEFAULT_STFT
    _check_nola(cfg, mag.shape[0])
    phase = np.zeros_like(mag) if init_phase is None else np.angle(np.exp(1j * init_phase))
    errors = []
    y = np.zeros(cfg.n_fft + cfg.hop_length * (mag.shape[0] - 1))
    for _ in range(n_iters):
        y = _istft_raw(mag * np.exp(1j * phase), cfg)
        rebuilt = _stft_raw(y, cfg)
        errors.append(spectral_convergence(np.abs(rebuilt), mag))
        phase = np.angle(rebuilt)
    if cfg.center_pad:
        y = y[cfg.n_fft // 2:]
    if length is None:
        length = (mag.shape[0] - 1) * cfg.hop_length
    if y.size < length:
        y = np.pad(y, (0, length - y.size))
    out = Waveform(y[:length], sample_rate)
    return (out, errors) if return_errors else out


# --------------------------------------------------------------------------
# time stretch / pitch shift
# --------------------------------------------------------------------------

def time_stretch(x: np.ndarray, rate: float, n_fft: int = 2048, hop: int | None = None) -> np.ndarray:
    """Phase-vocoder stretch; ``rate > 1`` speeds up. Output length ``round(len/rate)``."""
    x = np.asarray(x, dtype=np.float64)
    hop = hop or n_fft // 4
    cfg = StftConfig(n_fft=n_fft, win_length=n_fft, hop_length=hop)
    spec = stft(x, cfg).values
    n_frames, n_bins = spec.shape
    steps = np.arange(0, n_frames, rate)
    spec = np.vstack([spec, np.zeros((2, n_bins), dtype=spec.dtype)])
    expected_advance = 2 * np.pi * hop * np.arange(n_bins) / n_fft
    phase = np.angle(spec[0])
    out = np.empty((steps.size, n_bins), dtype=np.complex128)
    for i, step in enumerate(steps):
        k = int(step)
        frac = step - k
        mag = (1 - frac) * np.abs(spec[k]) + frac * np.abs(spec[k + 1])
        out[i] = mag * np.exp(1j * phase)
        dphi = np.angle(spec[k + 1]) - np.angle(spec[k]) - expected_advance
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + expected_advance + dphi
    length = int(round(x.size / rate))
    return istft(Spectrogram(out, cfg), length=length).samples


def pitch_shift(w: Waveform, semitones: float, n_fft: int = 2048) -> Waveform:
    """Shift pitch by ``semitones`` keeping duration: stretch, then resample back."""
    if abs(semitones) > 12:
        raise ValueError("pitch shift limited to +/-12 semitones")
    if len(w) == 0:
        raise ValueError("empty waveform")
    if semitones == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(w.samples, 1.0 / ratio, n_fft=n_fft)
    out = signal.resample(stretched, len(w))
    return Waveform(out, w.sample_rate)


def dominant_frequency(w: Waveform | np.ndarray, sample_rate: int | None = None) -> float:
    """Frequency (Hz) of the largest whole-signal FFT bin."""
    if isinstance(w, Waveform):
        x, sr = w.samples, w.sample_rate
    else:
        x, sr = np.asarray(w, dtype=np.float64), sample_rate
    spectrum = np.abs(np.fft.rfft(x))
    return float(np.argmax(spectrum) * sr / x.size)


# --------------------------------------------------------------------------
# WAV I/O
# --------------------------------------------------------------------------

def read_wav(path: str | Path) -> Waveform:
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return Waveform(data, int(sr))


def write_wav(path: str | Path, w: Waveform, fmt: str = "pcm16"):
    """Write mono WAV as 16-bit PCM (``pcm16``) or 32-bit float (``float32``)."""
    x = np.clip(w.samples, -1.0, 1.0)
    if fmt == "pcm16":
        data = np.round(x * 32767.0).astype(np.int16)
    elif fmt == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    wavfile.write(str(path), int(w.sample_rate), data)

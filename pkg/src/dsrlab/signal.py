"""Sampled-signal types and the convolution, correlation and framing primitives."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import signal as sps

from dsrlab._backend import kernels

# below this many multiply-adds the direct sum is cheaper than an FFT
DIRECT_SIZE_LIMIT = 65536


class WindowKind(str, Enum):
    RECTANGULAR = "rectangular"
    HAMMING = "hamming"


@dataclass(frozen=True, eq=False)
class AudioSignal:
    """A mono waveform with its sample rate.

    Samples are stored as a read-only float64 array.
    """

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        data = np.array(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(data)):
            raise ValueError("samples must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "samples", data)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_samples(self, samples) -> "AudioSignal":
        return AudioSignal(samples, self.sample_rate)


@dataclass(frozen=True, eq=False)
class FrameSet:
    frames: np.ndarray  # (n_frames, frame_length)
    frame_length: int
    frame_shift: int
    window_kind: WindowKind = WindowKind.HAMMING

    def __post_init__(self):
        if not 0 < self.frame_shift <= self.frame_length:
            raise ValueError("need 0 < frame_shift <= frame_length")

    def __len__(self):
        return self.frames.shape[0]


def _as_array(x) -> np.ndarray:
    if isinstance(x, AudioSignal):
        return x.samples
    return np.asarray(x, dtype=np.float64).reshape(-1)


def convolve_arrays(x, h, method: str = "auto") -> np.ndarray:
    """Full linear convolution of two 1-D arrays.

    ``method`` is ``"direct"``, ``"fft"`` or ``"auto"`` (direct below
    :data:`DIRECT_SIZE_LIMIT` multiply-adds).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    if len(x) == 0 or len(h) == 0:
        raise ValueError("convolution inputs must be non-empty")
    if method == "auto":
        method = "direct" if len(x) * len(h) <= DIRECT_SIZE_LIMIT else "fft"
    if method == "direct":
        return kernels.direct_convolve(x, h)
    if method == "fft":
        return sps.fftconvolve(x, h)
    raise ValueError(f"unknown method {method!r}")


def convolve(x: AudioSignal, h, method: str = "auto") -> AudioSignal:
    """Linear convolution ``y[n] = sum_m x[n-m] h[m]``; output length len(x)+len(h)-1."""
    return AudioSignal(convolve_arrays(_as_array(x), _as_array(h), method), x.sample_rate)


def correlate_arrays(s, y, max_lag: int, method: str = "auto") -> np.ndarray:
    """``R[n] = sum_l s[l] y[l+n]`` for ``n`` in ``[-max_lag, max_lag]``.

    Element ``k`` of the result holds lag ``k - max_lag``. Out-of-range samples
    count as zero.
    """
    s = np.ascontiguousarray(s, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if len(s) == 0 or len(y) == 0:
        raise ValueError("correlation inputs must be non-empty")
    if max_lag < 0:
        raise ValueError("max_lag must be non-negative")
    if method == "auto":
        method = "direct" if len(s) * (2 * max_lag + 1) <= DIRECT_SIZE_LIMIT else "fft"
    if method == "direct":
        return kernels.direct_xcorr(s, y, int(max_lag))
    if method != "fft":
        raise ValueError(f"unknown method {method!r}")
    # full[k] holds lag k - (len(s) - 1)
    full = sps.fftconvolve(y, s[::-1])
    out = np.zeros(2 * max_lag + 1)
    lags = np.arange(-max_lag, max_lag + 1)
    pos = lags + len(s) - 1
    ok = (pos >= 0) & (pos < len(full))
    out[ok] = full[pos[ok]]
    return out


def cross_correlate(s: AudioSignal, y: AudioSignal, max_lag: int, method: str = "auto") -> np.ndarray:
    if s.sample_rate != y.sample_rate:
        raise ValueError(f"sample rates differ: {s.sample_rate} vs {y.sample_rate}")
    return correlate_arrays(s.samples, y.samples, max_lag, method)


def hamming(length: int) -> np.ndarray:
    k = np.arange(length)
    if length == 1:
        return np.ones(1)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (length - 1))


def frame_signal(
    x: AudioSignal,
    frame_ms: float = 25.0,
    shift_ms: float = 10.0,
    window_kind: WindowKind | str = WindowKind.HAMMING,
) -> FrameSet:
    """Cut a signal into overlapping windowed frames.

    A signal shorter than one frame yields an empty frame set.
    """
    window_kind = WindowKind(window_kind)
    frame_length = int(round(frame_ms * 1e-3 * x.sample_rate))
    frame_shift = int(round(shift_ms * 1e-3 * x.sample_rate))
    return frame_array(x.samples, frame_length, frame_shift, window_kind)


def frame_array(samples, frame_length: int, frame_shift: int,
                window_kind: WindowKind | str = WindowKind.HAMMING) -> FrameSet:
    window_kind = WindowKind(window_kind)
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < frame_length:
        return FrameSet(np.zeros((0, frame_length)), frame_length, frame_shift, window_kind)
    n_frames = (len(samples) - frame_length) // frame_shift + 1
    idx = np.arange(frame_length)[None, :] + frame_shift * np.arange(n_frames)[:, None]
    frames = samples[idx]
    if window_kind is WindowKind.HAMMING:
        frames = frames * hamming(frame_length)
    return FrameSet(frames, frame_length, frame_shift, window_kind)


def power(x) -> float:
    x = _as_array(x)
    return float(np.mean(x * x))


def tile_to_length(x, length: int) -> np.ndarray:
    x = _as_array(x)
    reps = -(-length // len(x))
    return np.tile(x, reps)[:length]


def snr_gain(clean, noise, snr_db: float) -> float:
    """Gain ``g`` such that ``clean`` over ``g*noise`` has the requested SNR."""
    p_clean = power(clean)
    p_noise = power(noise)
    if p_clean == 0.0 or p_noise == 0.0:
        raise ValueError("clean and noise must both have non-zero power")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean: AudioSignal, noise: AudioSignal, snr_db: float) -> AudioSignal:
    """Add noise scaled to ``snr_db`` over the clean extent.

    Longer noise is trimmed; shorter noise is tiled cyclically.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("sample rates differ")
    n = tile_to_length(noise.samples, len(clean))
    if np.isinf(snr_db) and snr_db > 0:
        return clean
    g = snr_gain(clean.samples, n, snr_db)
    return clean.with_samples(clean.samples + g * n)


def contaminate(
    clean: AudioSignal,
    ir,
    noise: AudioSignal | None = None,
    snr_db: float | None = None,
    truncate: bool = False,
) -> AudioSignal:
    """Distant-talking simulation ``y = x * h + v``.

    With ``truncate`` the reverberant output is cut to the clean length,
    otherwise the full convolution tail is kept.
    """
    h = ir.signal if hasattr(ir, "signal") else ir
    y = convolve(clean, h)
    if truncate:
        y = y.with_samples(y.samples[: len(clean)])
    if noise is not None:
        if snr_db is None:
            raise ValueError("snr_db is required when noise is given")
        y = mix_at_snr(y, noise, snr_db)
    return y


def normalized_correlation(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = np.linalg.norm(a) * np.linalg.norm(b)
    if den == 0.0:
        return 0.0
    return float(np.dot(a, b) / den)


def decimate(x: AudioSignal, factor: int) -> AudioSignal:
    """Integer-factor decimation with an anti-aliasing FIR."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return x
    y = sps.decimate(x.samples, factor, ftype="fir", zero_phase=True)
    return AudioSignal(y, x.sample_rate / factor)


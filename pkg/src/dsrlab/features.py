"""FBANK/MFCC extraction, normalization, context windows and feature analyses."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from dsrlab.errors import FormatError
from dsrlab.signal import AudioSignal, frame_signal
from dsrlab.wavio import atomic_write

#: floor applied to filterbank energies before the log
LOG_FLOOR = 1e-10

DSRF_MAGIC = b"DSRF"
DSRF_VERSION = 1
_DSRF_HEADER = struct.Struct("<4sIIIf")


class FeatureKind(str, Enum):
    FBANK = "FBANK"
    MFCC = "MFCC"
    MFCC_D = "MFCC+D"
    MFCC_D_DD = "MFCC+D+DD"


_FIXED_DIMS = {FeatureKind.MFCC: 13, FeatureKind.MFCC_D: 26, FeatureKind.MFCC_D_DD: 39}


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Frames x dims feature values for one utterance."""

    values: np.ndarray
    frame_shift_ms: float = 10.0
    kind: FeatureKind = FeatureKind.FBANK

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"feature values must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        kind = FeatureKind(self.kind)
        want = _FIXED_DIMS.get(kind)
        if want is not None and v.shape[1] != want:
            raise ValueError(f"{kind.value} features have {want} dims, got {v.shape[1]}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "kind", kind)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def with_values(self, values, kind: FeatureKind | None = None) -> "FeatureMatrix":
        return FeatureMatrix(values, self.frame_shift_ms, self.kind if kind is None else kind)


@dataclass(frozen=True)
class MelFilterbankSpec:
    n_filters: int = 40
    f_min: float = 0.0
    f_max: float | None = None  # None means fs / 2
    fft_size: int | None = None  # None means next power of two >= frame length

    def __post_init__(self):
        if self.n_filters < 2:
            raise ValueError("n_filters must be >= 2")
        if self.f_min < 0 or (self.f_max is not None and self.f_max <= self.f_min):
            raise ValueError("need 0 <= f_min < f_max")


@dataclass(frozen=True)
class ContextWindowSpec:
    """Numbers of past (``n_past``) and future (``n_future``) frames."""

    n_past: int = 0
    n_future: int = 0

    def __post_init__(self):
        if self.n_past < 0 or self.n_future < 0:
            raise ValueError("context sizes must be non-negative")

    @property
    def width(self) -> int:
        return self.n_past + self.n_future + 1

    @property
    def rho(self) -> float:
        """Past/future balance factor ``Np / (Np + Nf)``; 0.5 for an empty window."""
        total = self.n_past + self.n_future
        return 0.5 if total == 0 else self.n_past / total


@dataclass(frozen=True, eq=False)
class LagCorrelation:
    lags: np.ndarray
    r: np.ndarray

    def at(self, lag: int) -> float:
        return float(self.r[int(np.flatnonzero(self.lags == lag)[0])])

    @property
    def best_lag(self) -> int:
        return int(self.lags[np.argmax(self.r)])


@dataclass(frozen=True, eq=False)
class FrameImportance:
    lags: np.ndarray
    values: np.ndarray


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(spec: MelFilterbankSpec, sample_rate: float, fft_size: int) -> np.ndarray:
    """Triangular filters on the rfft bin grid, shape (n_filters, fft_size//2 + 1).

    Edges are equally spaced on the mel scale; each triangle peaks at 1 on
    its centre frequency and falls linearly (in Hz) to zero at its neighbours.
    """
    f_max = sample_rate / 2.0 if spec.f_max is None else spec.f_max
    if f_max > sample_rate / 2.0:
        raise ValueError("f_max exceeds the Nyquist frequency")
    edges = mel_to_hz(np.linspace(hz_to_mel(spec.f_min), hz_to_mel(f_max), spec.n_filters + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def power_spectrum(signal: AudioSignal, frame_ms=25.0, shift_ms=10.0, fft_size=None):
    frames = frame_signal(signal, frame_ms, shift_ms)
    if len(frames) == 0:
        raise ValueError("signal is shorter than one analysis frame")
    n_fft = fft_size or _next_pow2(frames.frame_length)
    spec = np.abs(np.fft.rfft(frames.frames, n_fft)) ** 2
    return spec, n_fft


def fbank(
    signal: AudioSignal,
    spec: MelFilterbankSpec | None = None,
    frame_ms: float = 25.0,
    shift_ms: float = 10.0,
) -> FeatureMatrix:
    """Log mel-filterbank energies (natural log, floored at :data:`LOG_FLOOR`)."""
    spec = spec or MelFilterbankSpec()
    pspec, n_fft = power_spectrum(signal, frame_ms, shift_ms, spec.fft_size)
    weights = mel_filterbank(spec, signal.sample_rate, n_fft)
    energies = pspec @ weights.T
    return FeatureMatrix(np.log(np.maximum(energies, LOG_FLOOR)), shift_ms, FeatureKind.FBANK)


def dct_coefficients(logmel, n_ceps: int = 13) -> np.ndarray:
    """Orthonormal DCT-II along the last axis, truncated to ``n_ceps``."""
    return sfft.dct(np.asarray(logmel, dtype=np.float64), type=2, norm="ortho", axis=-1)[..., :n_ceps]


def mfcc(
    signal: AudioSignal,
    spec: MelFilterbankSpec | None = None,
    frame_ms: float = 25.0,
    shift_ms: float = 10.0,
) -> FeatureMatrix:
    fb = fbank(signal, spec, frame_ms, shift_ms)
    return FeatureMatrix(dct_coefficients(fb.values, 13), shift_ms, FeatureKind.MFCC)


def delta(values, window: int = 2) -> np.ndarray:
    """Regression deltas ``sum_n n (c[t+n] - c[t-n]) / (2 sum_n n^2)``, edges replicated."""
    values = np.asarray(values, dtype=np.float64)
    t = values.shape[0]
    padded = np.concatenate([np.repeat(values[:1], window, 0), values, np.repeat(values[-1:], window, 0)])
    out = np.zeros_like(values)
    for n in range(1, window + 1):
        out += n * (padded[window + n : window + n + t] - padded[window - n : window - n + t])
    return out / (2.0 * sum(n * n for n in range(1, window + 1)))


def deltas(features: FeatureMatrix, order: int = 2, window: int = 2) -> FeatureMatrix:
    """Append delta (and delta-delta) streams: 13 -> 26 -> 39 dims for MFCCs."""
    if order not in (0, 1, 2):
        raise ValueError("delta order must be 0, 1 or 2")
    streams = [features.values]
    for _ in range(order):
        streams.append(delta(streams[-1], window))
    kind = features.kind
    if kind is FeatureKind.MFCC and order:
        kind = FeatureKind.MFCC_D if order == 1 else FeatureKind.MFCC_D_DD
    return FeatureMatrix(np.hstack(streams), features.frame_shift_ms, kind)


def cmvn(features: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance mean and variance normalization; constant dims become 0."""
    v = features.values
    mu = v.mean(axis=0)
    sd = v.std(axis=0)
    centred = v - mu
    # spreads at roundoff level of the column magnitude count as constant
    live = sd > 64 * np.finfo(np.float64).eps * np.maximum(np.abs(v).max(axis=0, initial=0.0), 1e-300)
    scale = np.where(live, sd, 1.0)
    out = np.where(live, centred / scale, 0.0)
    return features.with_values(out)


def assemble_context(features, spec: ContextWindowSpec) -> np.ndarray:
    """Stack ``Np`` past and ``Nf`` future frames around every frame.

    Row ``k`` is ``[y[k-Np], ..., y[k], ..., y[k+Nf]]``, with out-of-range
    indices clamped to the first or last frame.
    """
    v = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError("features must be a non-empty 2-D matrix")
    t = v.shape[0]
    offsets = np.arange(-spec.n_past, spec.n_future + 1)
    idx = np.clip(np.arange(t)[:, None] + offsets[None, :], 0, t - 1)
    return v[idx].reshape(t, -1)


def context_center(stacked: np.ndarray, spec: ContextWindowSpec, dims: int) -> np.ndarray:
    """The current-frame block of a stacked matrix."""
    return stacked[:, spec.n_past * dims : (spec.n_past + 1) * dims]


def pearson_lag_correlation(x, y, n_past: int, n_future: int) -> LagCorrelation:
    """Pearson correlation between ``x[k]`` and ``y[k + p]`` for p in [-Np, Nf].

    Computed per dimension over the overlapping frames (means taken over the
    overlap) and averaged across dimensions. A delayed copy ``y[k] = x[k-3]``
    therefore peaks at ``p = 3``.
    """
    x = x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    y = y.values if isinstance(y, FeatureMatrix) else np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[1] != y.shape[1]:
        raise ValueError("feature dimensions differ")
    t = min(len(x), len(y))
    lags = np.arange(-n_past, n_future + 1)
    r = np.empty(len(lags))
    for i, p in enumerate(lags):
        lo, hi = max(0, -p), min(t, t - p)
        if hi - lo < 2:
            raise ValueError(f"no overlap at lag {p}")
        a = x[lo:hi]
        b = y[lo + p : hi + p]
        a = a - a.mean(axis=0)
        b = b - b.mean(axis=0)
        den = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
        if np.any(den == 0):
            raise ValueError(f"zero-variance dimension at lag {p}; correlation undefined")
        r[i] = float(np.mean((a * b).sum(axis=0) / den))
    return LagCorrelation(lags, r)


def delay_frames(delay_samples: float, sample_rate: float, shift_ms: float = 10.0) -> int:
    return int(round(delay_samples / (shift_ms * 1e-3 * sample_rate)))


def compensate_delay(features: FeatureMatrix, frames: int) -> FeatureMatrix:
    """Advance a feature stream by ``frames`` (drops the leading frames)."""
    if frames < 0:
        raise ValueError("delay must be non-negative")
    if frames >= features.n_frames:
        raise ValueError("delay exceeds the utterance length")
    return features.with_values(features.values[frames:])


def frame_importance(weights, n_past: int, n_future: int, dims: int) -> FrameImportance:
    """Squared first-layer weights summed per context frame, max-normalized.

    ``weights`` has one row per first-layer neuron and ``(Np+Nf+1)*dims``
    columns ordered like :func:`assemble_context` output.
    """
    w = np.asarray(weights, dtype=np.float64)
    width = n_past + n_future + 1
    if w.ndim != 2 or w.shape[1] != width * dims:
        raise ValueError(f"expected {width * dims} input columns, got shape {w.shape}")
    blocks = (w * w).reshape(w.shape[0], width, dims).sum(axis=(0, 2))
    peak = blocks.max()
    if peak == 0:
        raise ValueError("all-zero weights give no importance profile")
    return FrameImportance(np.arange(-n_past, n_future + 1), blocks / peak)


def write_features(path, features: FeatureMatrix) -> None:
    """Write the little-endian DSRF container atomically."""
    v = np.ascontiguousarray(features.values, dtype="<f4")
    header = _DSRF_HEADER.pack(DSRF_MAGIC, DSRF_VERSION, v.shape[0], v.shape[1], features.frame_shift_ms)
    payload = header + v.tobytes()
    atomic_write(path, lambda fh: fh.write(payload))


def _kind_for_dims(dims: int) -> FeatureKind:
    for kind, n in _FIXED_DIMS.items():
        if n == dims:
            return kind
    return FeatureKind.FBANK


def read_features(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < _DSRF_HEADER.size:
        raise FormatError(f"{path}: truncated DSRF header")
    magic, version, frames, dims, shift = _DSRF_HEADER.unpack_from(data)
    if magic != DSRF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DSRF_VERSION:
        raise FormatError(f"{path}: unsupported DSRF version {version}")
    expected = _DSRF_HEADER.size + 4 * frames * dims
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=_DSRF_HEADER.size).reshape(frames, dims)
    try:
        return FeatureMatrix(values.astype(np.float64), float(shift), _kind_for_dims(dims))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def synthetic_speech(duration_s: float, sample_rate: float = 16000.0, seed: int = 0) -> AudioSignal:
    """Speech-like test signal: a gliding harmonic source through moving formants.

    Voiced stretches alternate with noise bursts and short pauses so that
    successive frames are correlated only over a few tens of milliseconds.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    out = np.zeros(n)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.06, 0.25) * sample_rate)
        stop = min(n, pos + seg)
        tt = t[pos:stop] - t[pos]
        kind = rng.choice(3, p=[0.6, 0.25, 0.15])
        if kind == 0:
            f0 = rng.uniform(90, 220) * (1 + rng.uniform(-0.2, 0.2) * tt / max(tt[-1], 1e-9))
            phase = 2 * np.pi * np.cumsum(f0) / sample_rate
            formants = rng.uniform([300, 900, 2200], [800, 2000, 3200])
            src = np.zeros_like(tt)
            for k in range(1, int(4000 / f0.max())):
                fk = k * f0
                amp = np.exp(-((fk[0] - formants[:, None]) ** 2) / (2 * 150.0**2)).sum() + 0.05
                src += amp / k * np.sin(k * phase)
            piece = src
        elif kind == 1:
            piece = rng.standard_normal(len(tt)) * 0.3
        else:
            piece = 0.01 * rng.standard_normal(len(tt))
        env = np.sin(np.pi * np.arange(len(tt)) / max(len(tt), 1)) ** 0.5
        out[pos:stop] = piece * env
        pos = stop
    out /= np.max(np.abs(out)) + 1e-12
    return AudioSignal(0.5 * out, sample_rate)

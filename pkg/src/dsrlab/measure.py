"""Excitation signals and correlation-based impulse response estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import fft as sfft

from dsrlab._backend import kernels
from dsrlab.room import EstimationError, ImpulseResponse
from dsrlab.signal import AudioSignal, normalized_correlation

#: Feedback taps (polynomial exponents) of a primitive polynomial for each
#: MLS order. The register obeys a[k] = XOR_t a[k - t] and starts all ones;
#: every entry has been checked to cycle with period 2**m - 1.
MLS_TAPS: dict[int, tuple[int, ...]] = {
    2: (2, 1),
    3: (3, 2),
    4: (4, 3),
    5: (5, 3),
    6: (6, 5),
    7: (7, 6),
    8: (8, 6, 5, 4),
    9: (9, 5),
    10: (10, 7),
    11: (11, 9),
    12: (12, 6, 4, 1),
    13: (13, 4, 3, 1),
    14: (14, 5, 3, 1),
    15: (15, 14),
    16: (16, 15, 13, 4),
    17: (17, 14),
    18: (18, 11),
    19: (19, 6, 2, 1),
    20: (20, 17),
    21: (21, 19),
    22: (22, 21),
    23: (23, 18),
    24: (24, 23, 22, 17),
}

#: samples kept ahead of the linear-response peak when trimming
PRE_PEAK = 64

#: minimum peak-to-RMS ratio of the raw estimate
PEAK_FLOOR = 8.0


class ExcitationKind(str, Enum):
    MLS = "MLS"
    LSS = "LSS"
    ESS = "ESS"


@dataclass(frozen=True)
class ExcitationSpec:
    """Excitation parameters; frequencies are angular, in rad/sample."""

    kind: ExcitationKind
    length: int
    w1: float = 2.0 * math.pi * 20.0 / 16000.0
    w2: float = math.pi
    amplitude: float = 1.0
    fade_ms: float = 50.0
    sample_rate: float = 16000.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ExcitationKind(self.kind))
        if self.length <= 0:
            raise ValueError("length must be positive")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if self.kind is ExcitationKind.MLS:
            order = int(round(math.log2(self.length + 1)))
            if 2**order - 1 != self.length:
                raise ValueError(f"MLS length must be 2**m - 1, got {self.length}")
        else:
            if self.w1 == self.w2:
                raise ValueError("w1 == w2 makes the sweep degenerate")
            if not 0.0 < self.w1 < self.w2 <= math.pi:
                raise ValueError(f"need 0 < w1 < w2 <= pi, got {self.w1}, {self.w2}")

    @property
    def mls_order(self) -> int:
        return int(round(math.log2(self.length + 1)))


def mls_bits(order: int) -> np.ndarray:
    if order not in MLS_TAPS:
        raise ValueError(f"MLS order must be in 2..24, got {order}")
    taps = np.asarray(MLS_TAPS[order], dtype=np.int64)
    return kernels.lfsr_bits(order, taps, 2**order - 1)


def generate_mls(order: int, sample_rate: float = 16000.0) -> AudioSignal:
    """One period of a +-1 maximal-length sequence (bit 1 -> +1)."""
    bits = mls_bits(order)
    return AudioSignal(2.0 * bits.astype(np.float64) - 1.0, sample_rate)


def apply_fades(signal: AudioSignal, fade_ms: float) -> AudioSignal:
    """Raised-cosine fade-in and fade-out; the interior is untouched."""
    n = int(round(fade_ms * 1e-3 * signal.sample_rate))
    if n == 0:
        return signal
    if n > len(signal) // 2:
        raise ValueError("fades longer than half the signal")
    ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(n) / n))
    out = signal.samples.copy()
    out[:n] *= ramp
    out[-n:] *= ramp[::-1]
    return signal.with_samples(out)


def lss_phase(n, spec: ExcitationSpec):
    n = np.asarray(n, dtype=np.float64)
    return spec.w1 * n + (spec.w2 - spec.w1) / spec.length * n * n / 2.0


def ess_phase(n, spec: ExcitationSpec):
    n = np.asarray(n, dtype=np.float64)
    r = math.log(spec.w2 / spec.w1)
    return spec.w1 * spec.length / r * (np.exp(n / spec.length * r) - 1.0)


def generate_lss(spec: ExcitationSpec) -> AudioSignal:
    s = spec.amplitude * np.sin(lss_phase(np.arange(spec.length), spec))
    return apply_fades(AudioSignal(s, spec.sample_rate), spec.fade_ms)


def generate_ess(spec: ExcitationSpec) -> AudioSignal:
    s = spec.amplitude * np.sin(ess_phase(np.arange(spec.length), spec))
    return apply_fades(AudioSignal(s, spec.sample_rate), spec.fade_ms)


def generate(spec: ExcitationSpec) -> AudioSignal:
    if spec.kind is ExcitationKind.MLS:
        mls = generate_mls(spec.mls_order, spec.sample_rate)
        return mls.with_samples(spec.amplitude * mls.samples)
    if spec.kind is ExcitationKind.LSS:
        return generate_lss(spec)
    return generate_ess(spec)


def whitening_gain(n_fft: int, w1: float, w2: float) -> np.ndarray:
    """+3 dB/octave magnitude ramp on the rfft grid, unity at sqrt(w1 * w2)."""
    w = np.linspace(0.0, np.pi, n_fft // 2 + 1)
    return np.sqrt(w / math.sqrt(w1 * w2))


def _linear_correlation(s, y, weight=None):
    """All lags of sum_l s[l] y[l+n]; returns (values, lag of element 0)."""
    n_fft = sfft.next_fast_len(len(s) + len(y) - 1, real=True)
    S = sfft.rfft(s, n_fft)
    Y = sfft.rfft(y, n_fft)
    G = np.conj(S) * Y
    auto = np.abs(S) ** 2
    if weight is not None:
        G = G * weight
        auto = auto * weight
    r = sfft.irfft(G, n_fft)
    # zero-lag of the (weighted) excitation autocorrelation
    energy = float(sfft.irfft(auto, n_fft)[0])
    # lags >= 0 sit at the start, negative lags wrap to the end
    neg = len(s) - 1
    values = np.concatenate([r[n_fft - neg:], r[: len(y)]]) if neg else r[: len(y)]
    return values / energy, -neg


def _mls_layout(n: int) -> tuple[int, int]:
    for k in range(1, 65):
        if n % k == 0 and ((n // k + 1) & (n // k)) == 0:
            return n // k, k
    raise ValueError(f"excitation of length {n} is not a whole number of MLS periods")


def _estimate_mls(s, y):
    period, reps = _mls_layout(len(s))
    one = s[:period]
    folded = np.zeros(period)
    for start in range(0, len(y), period):
        chunk = y[start : start + period]
        folded[: len(chunk)] += chunk
    R = sfft.irfft(np.conj(sfft.rfft(one)) * sfft.rfft(folded), period)
    v2 = float(np.dot(one, one)) / period
    h = (R + R.sum()) / ((period + 1) * v2 * reps)
    return h, 0


def _trim(raw, first_lag, ir_length, circular=False):
    peak = int(np.argmax(np.abs(raw)))
    rms = float(np.sqrt(np.mean(raw * raw)))
    if rms == 0.0 or abs(raw[peak]) < PEAK_FLOOR * rms:
        raise EstimationError("no impulse-response peak above the noise floor")
    start = peak - PRE_PEAK
    idx = np.arange(start, start + ir_length)
    if circular:
        out = raw[idx % len(raw)]
    else:
        out = np.zeros(ir_length)
        ok = (idx >= 0) & (idx < len(raw))
        out[ok] = raw[idx[ok]]
    return out, start + first_lag


def estimate_ir(
    excitation: AudioSignal,
    recording: AudioSignal,
    kind: ExcitationKind | str,
    ir_length: int,
    w1: float | None = None,
    w2: float | None = None,
) -> ImpulseResponse:
    """Recover an IR by correlating the recording with the known excitation.

    MLS excitations (one or more whole periods) use circular correlation of
    the period-folded recording, which is exact for IRs shorter than a period.
    Sweeps use linear correlation normalized by the excitation energy; for
    ESS both signals are first whitened by +3 dB/octave, using ``w1``/``w2``
    (rad/sample) to place the unity-gain point. The result is the
    ``ir_length`` samples starting :data:`PRE_PEAK` samples before the
    strongest lag, which drops the harmonic-distortion products an ESS
    places at negative lags. ``lag0`` records the lag of the first sample.
    """
    kind = ExcitationKind(kind)
    if excitation.sample_rate != recording.sample_rate:
        raise ValueError("sample rates differ")
    if len(recording) < len(excitation):
        raise ValueError("recording is shorter than the excitation")
    s, y = excitation.samples, recording.samples
    if kind is ExcitationKind.MLS:
        raw, first = _estimate_mls(s, y)
        out, lag0 = _trim(raw, first, ir_length, circular=True)
    else:
        weight = None
        if kind is ExcitationKind.ESS:
            if w1 is None or w2 is None:
                raise ValueError("ESS estimation needs the sweep band (w1, w2)")
            n_fft = sfft.next_fast_len(len(s) + len(y) - 1, real=True)
            weight = whitening_gain(n_fft, w1, w2) ** 2
        raw, first = _linear_correlation(s, y, weight)
        out, lag0 = _trim(raw, first, ir_length)
    return ImpulseResponse(AudioSignal(out, recording.sample_rate), lag0=lag0)


def measure(spec: ExcitationSpec, recording: AudioSignal, ir_length: int) -> ImpulseResponse:
    """:func:`estimate_ir` with the excitation regenerated from ``spec``."""
    return estimate_ir(generate(spec), recording, spec.kind, ir_length, spec.w1, spec.w2)


def aligned_truth(estimate: ImpulseResponse, truth) -> tuple[np.ndarray, np.ndarray]:
    """Pair estimate samples with ground-truth taps at the same absolute lag."""
    truth = np.asarray(truth, dtype=np.float64)
    est = estimate.samples
    lags = estimate.lag0 + np.arange(len(est))
    ref = np.zeros(len(est))
    ok = (lags >= 0) & (lags < len(truth))
    ref[ok] = truth[lags[ok]]
    return est, ref


def recovery_correlation(estimate: ImpulseResponse, truth, energy_fraction: float = 1.0) -> float:
    """Normalized correlation with the true IR over its leading energy.

    Only true-IR lags up to the point holding ``energy_fraction`` of its
    energy are compared.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if energy_fraction < 1.0:
        cum = np.cumsum(truth**2)
        last = int(np.searchsorted(cum, energy_fraction * cum[-1])) + 1
        truth = truth[:last]
    est, ref = aligned_truth(estimate, truth)
    lags = estimate.lag0 + np.arange(len(est))
    keep = (lags >= 0) & (lags < len(truth))
    return normalized_correlation(est[keep], ref[keep])

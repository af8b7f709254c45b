"""Shoebox impulse responses with a directional image method, plus T60/DRR.

Source directivity follows a raised-cosine power law in azimuth and elevation,
``D = (((1+cos th)/2)^p ((1+cos ph)/2)^q + eps) / (1 + eps)``, evaluated on
the departure direction of every image path. Paths are found by mirroring the
microphone rather than the source, which by reciprocity gives the same path
lengths while exposing the direction in which each path leaves the source.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from dsrlab._backend import kernels
from dsrlab.signal import AudioSignal
from dsrlab.wavio import atomic_write, read_wav, write_wav

#: directivity exponents and floor used for the directional-source experiments
PAPER_DIRECTIVITY = {"p": 3.0, "q": 1.0, "eps": 0.01}

#: relative level (linear amplitude) below which the last reflection order may fall
ORDER_FLOOR = 1e-3


class EstimationError(ValueError):
    """Raised when an IR does not support the requested estimate."""


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple[float, float, float]
    reflection_coeffs: tuple[float, ...] = (0.8,) * 6
    sound_speed: float = 343.0

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dimensions)
        refl = self.reflection_coeffs
        if np.isscalar(refl):
            refl = (refl,) * 6
        refl = tuple(float(r) for r in refl)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"room dimensions must be three positive lengths, got {dims}")
        if len(refl) != 6 or not all(0.0 <= r <= 1.0 for r in refl):
            raise ValueError("need six reflection coefficients in [0, 1]")
        if self.sound_speed <= 0:
            raise ValueError("sound speed must be positive")
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "reflection_coeffs", refl)

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dimensions)))


@dataclass(frozen=True)
class SourceSpec:
    """Source position (m), orientation (rad) and directivity exponents."""

    position: tuple[float, float, float]
    azimuth: float = 0.0
    elevation: float = 0.0
    p: float = 0.0
    q: float = 0.0
    eps: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if self.p < 0 or self.q < 0:
            raise ValueError("directivity exponents must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


class MicPattern(str, Enum):
    OMNI = "omnidirectional"
    CARDIOID = "cardioid"


@dataclass(frozen=True)
class MicSpec:
    position: tuple[float, float, float]
    pattern: MicPattern = MicPattern.OMNI
    azimuth: float = 0.0
    elevation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "pattern", MicPattern(self.pattern))


@dataclass(frozen=True, eq=False)
class ImpulseResponse:
    """An IR plus where it came from.

    ``lag0`` is the absolute lag (in samples) of ``signal.samples[0]``; it is
    zero for simulated IRs and the trim offset for measured ones.
    """

    signal: AudioSignal
    room: RoomSpec | None = None
    source: SourceSpec | None = None
    mic: MicSpec | None = None
    max_order: int | None = None
    lag0: int = 0

    @property
    def samples(self) -> np.ndarray:
        return self.signal.samples

    @property
    def sample_rate(self) -> float:
        return self.signal.sample_rate

    def __len__(self):
        return len(self.signal)


@dataclass(frozen=True)
class IrMetrics:
    t60: float
    drr: float
    direct_path_delay: int
    extra: dict = field(default_factory=dict)

    @property
    def drr_is_infinite(self) -> bool:
        return math.isinf(self.drr)


def directivity_gain(theta, phi, p: float, q: float, eps: float):
    """Total source directivity for azimuth/elevation offsets ``theta``/``phi``."""
    d_az = ((1.0 + np.cos(theta)) / 2.0) ** p
    d_el = ((1.0 + np.cos(phi)) / 2.0) ** q
    return (d_az * d_el + eps) / (1.0 + eps)


def reflection_attenuation(l: float, n: int, rho: float) -> float:
    """Spherical spreading plus ``n`` wall reflections: ``rho**n / (4 pi l)``."""
    if l <= 0:
        raise ValueError(f"path length must be positive, got {l}")
    if n < 0:
        raise ValueError("reflection count must be non-negative")
    return rho**n / (4.0 * math.pi * l)


def _distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, float) - np.asarray(b, float)))


def default_max_order(room: RoomSpec) -> int:
    """Smallest order whose wall losses alone put it :data:`ORDER_FLOOR` below the direct tap."""
    rho = max(room.reflection_coeffs)
    if rho == 0.0:
        return 0
    if rho >= 1.0:
        raise ValueError("lossless walls need an explicit max_order")
    return int(math.ceil(math.log(ORDER_FLOOR) / math.log(rho)))


def _check_geometry(room, source, mic):
    if not room.contains(source.position):
        raise ValueError(f"source {source.position} is not strictly inside the room")
    if not room.contains(mic.position):
        raise ValueError(f"microphone {mic.position} is not strictly inside the room")
    if _distance(source.position, mic.position) == 0.0:
        raise ValueError("source and microphone coincide (zero path length)")


def simulate_ir(
    room: RoomSpec,
    source: SourceSpec,
    mic: MicSpec,
    fs: float,
    max_order: int | None = None,
    n_samples: int | None = None,
) -> ImpulseResponse:
    """Simulate a source-to-microphone IR with the directional image method.

    Every image path with at most ``max_order`` wall hits adds a tap at
    ``round(fs * l / c)`` with gain ``prod(rho_w**hits_w) / (4 pi l) * D``.
    The default length covers all paths up to ``max_order`` times the
    shortest room dimension beyond the direct path.
    """
    _check_geometry(room, source, mic)
    if max_order is None:
        max_order = default_max_order(room)
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    c = room.sound_speed
    l_direct = _distance(source.position, mic.position)
    if n_samples is None:
        n_samples = int(math.ceil(fs * (l_direct + max_order * min(room.dimensions)) / c)) + 2
    h = kernels.image_taps(
        np.asarray(room.dimensions, dtype=np.float64),
        np.asarray(source.position, dtype=np.float64),
        np.asarray(mic.position, dtype=np.float64),
        np.asarray(room.reflection_coeffs, dtype=np.float64),
        float(c),
        float(fs),
        int(max_order),
        float(source.azimuth),
        float(source.elevation),
        float(source.p),
        float(source.q),
        float(source.eps),
        1 if mic.pattern is MicPattern.CARDIOID else 0,
        float(mic.azimuth),
        float(mic.elevation),
        int(n_samples),
    )
    return ImpulseResponse(AudioSignal(h, fs), room, source, mic, int(max_order))


def simulate_ir_omni_reference(room: RoomSpec, src, mic, fs: float, max_order: int,
                               n_samples: int) -> np.ndarray:
    """Classic omnidirectional image method by mirroring the source.

    A plain-Python enumeration kept independent of the kernels; used as a
    reference for the directional path with ``p = q = 0``.
    """
    L = room.dimensions
    refl = room.reflection_coeffs
    h = np.zeros(n_samples)
    rng = range(-max_order, max_order + 1)
    for nx, ny, nz in itertools.product(rng, rng, rng):
        for ux, uy, uz in itertools.product((0, 1), repeat=3):
            hits = [abs(nx - ux), abs(nx), abs(ny - uy), abs(ny), abs(nz - uz), abs(nz)]
            if sum(hits) > max_order:
                continue
            img = [
                (1 - 2 * ux) * src[0] + 2 * nx * L[0],
                (1 - 2 * uy) * src[1] + 2 * ny * L[1],
                (1 - 2 * uz) * src[2] + 2 * nz * L[2],
            ]
            dist = math.dist(img, mic)
            idx = int(math.floor(dist / room.sound_speed * fs + 0.5))
            if idx >= n_samples:
                continue
            amp = 1.0
            for r, k in zip(refl, hits):
                amp *= r**k
            h[idx] += amp / (4.0 * math.pi * dist)
    return h


def direct_path_delay(source_pos, mic_pos, fs: float, c: float = 343.0) -> int:
    return int(math.floor(fs * _distance(source_pos, mic_pos) / c + 0.5))


def energy_decay_curve(h) -> np.ndarray:
    """Backward-integrated energy, normalized to 0 dB at the start."""
    e = np.asarray(h, dtype=np.float64) ** 2
    edc = np.cumsum(e[::-1])[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(edc / edc[0])


def estimate_t60(ir, fit_range=(-5.0, -35.0)) -> float:
    """Reverberation time from a least-squares fit of the Schroeder decay curve.

    The fit covers the ``fit_range`` span (dB) of the decay curve and is
    extrapolated to -60 dB.
    """
    h = ir.samples if hasattr(ir, "samples") else np.asarray(ir, dtype=np.float64)
    fs = ir.sample_rate if hasattr(ir, "sample_rate") else None
    if fs is None:
        raise TypeError("estimate_t60 needs an ImpulseResponse or AudioSignal")
    if np.count_nonzero(h) < 2:
        raise EstimationError("IR needs at least two non-zero taps")
    edc = energy_decay_curve(h)
    hi, lo = fit_range
    start = int(np.argmax(edc <= hi))
    below = np.nonzero(edc <= lo)[0]
    if len(below) == 0:
        raise EstimationError(f"decay curve never reaches {lo} dB")
    stop = int(below[0])
    if stop - start < 2:
        raise EstimationError("too few samples in the fit range")
    n = np.arange(start, stop + 1)
    slope, _ = np.polyfit(n, edc[start : stop + 1], 1)
    if slope >= 0:
        raise EstimationError("decay curve is not decreasing")
    return float(-60.0 / slope / fs)


def estimate_drr(ir, direct_window_ms: float = 5.0) -> float:
    """Direct-to-reverberant ratio in dB, ``+inf`` when nothing is reverberant.

    The direct part is the energy within +-``direct_window_ms/2`` of the
    strongest tap.
    """
    h = np.asarray(ir.samples, dtype=np.float64)
    fs = ir.sample_rate
    peak = int(np.argmax(np.abs(h)))
    half = int(round(direct_window_ms * 1e-3 * fs / 2.0))
    lo, hi = max(0, peak - half), min(len(h), peak + half + 1)
    e = h * h
    e_direct = float(np.sum(e[lo:hi]))
    e_rev = float(np.sum(e) - e_direct)
    if e_direct == 0.0:
        raise EstimationError("IR has no energy")
    if e_rev <= 0.0:
        return math.inf
    return 10.0 * math.log10(e_direct / e_rev)


def compute_metrics(ir: ImpulseResponse, direct_window_ms: float = 5.0) -> IrMetrics:
    try:
        t60 = estimate_t60(ir)
    except EstimationError:
        t60 = math.nan
    delay = int(np.argmax(np.abs(ir.samples))) + ir.lag0
    return IrMetrics(t60=t60, drr=estimate_drr(ir, direct_window_ms), direct_path_delay=delay)


def _json_float(x):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def ir_metadata(ir: ImpulseResponse, metrics: IrMetrics | None = None) -> dict:
    meta = {"fs": ir.sample_rate, "max_order": ir.max_order, "lag0": ir.lag0,
            "n_samples": len(ir)}
    if ir.room is not None:
        meta["room"] = asdict(ir.room)
    if ir.source is not None:
        meta["source"] = asdict(ir.source)
    if ir.mic is not None:
        mic = asdict(ir.mic)
        mic["pattern"] = ir.mic.pattern.value
        meta["mic"] = mic
    if metrics is not None:
        meta["metrics"] = {
            "t60": _json_float(metrics.t60),
            "drr": _json_float(metrics.drr),
            "drr_infinite": metrics.drr_is_infinite,
            "direct_path_delay": metrics.direct_path_delay,
            **{k: _json_float(v) for k, v in metrics.extra.items()},
        }
    return meta


def save_ir(path, ir: ImpulseResponse, metrics: IrMetrics | None = None) -> Path:
    """Write ``path`` (float32 WAV) and a sibling ``.json`` metadata record."""
    path = Path(path)
    write_wav(path, ir.signal, fmt="float32")
    meta = ir_metadata(ir, metrics)
    text = json.dumps(meta, indent=2, sort_keys=True).encode()
    atomic_write(path.with_suffix(".json"), lambda fh: fh.write(text))
    return path.with_suffix(".json")


def load_ir(path) -> ImpulseResponse:
    path = Path(path)
    sig = read_wav(path)
    meta_path = path.with_suffix(".json")
    if not meta_path.exists():
        return ImpulseResponse(sig)
    meta = json.loads(meta_path.read_text())
    room = RoomSpec(**{**meta["room"], "dimensions": tuple(meta["room"]["dimensions"]),
                       "reflection_coeffs": tuple(meta["room"]["reflection_coeffs"])}) \
        if "room" in meta else None
    source = SourceSpec(**meta["source"]) if "source" in meta else None
    mic = MicSpec(**meta["mic"]) if "mic" in meta else None
    return ImpulseResponse(sig, room, source, mic, meta.get("max_order"), meta.get("lag0", 0))

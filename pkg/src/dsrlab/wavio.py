"""Mono WAV read/write (PCM 16-bit and IEEE float32)."""

from __future__ import annotations

import os
import tempfile
import warnings

import numpy as np
from scipy.io import wavfile

from dsrlab.errors import FormatError
from dsrlab.signal import AudioSignal


class WavDecodeError(FormatError):
    """Raised for multi-channel or unsupported WAV content."""


def read_wav(path) -> AudioSignal:
    """Read a mono WAV file, normalizing samples to [-1, 1]."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except ValueError as exc:
        raise WavDecodeError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise WavDecodeError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavDecodeError(f"{path}: unsupported sample format {data.dtype}")
    return AudioSignal(samples, float(rate))


def encode(signal: AudioSignal, fmt: str = "float32") -> np.ndarray:
    if fmt == "float32":
        return signal.samples.astype(np.float32)
    if fmt == "pcm16":
        scaled = np.round(signal.samples * 32768.0)
        return np.clip(scaled, -32768, 32767).astype(np.int16)
    raise ValueError(f"unknown WAV format {fmt!r}")


def write_wav(path, signal: AudioSignal, fmt: str = "float32") -> None:
    """Write atomically (temporary file then rename)."""
    rate = int(round(signal.sample_rate))
    if rate != signal.sample_rate:
        raise ValueError("WAV needs an integer sample rate")
    data = encode(signal, fmt)
    atomic_write(path, lambda fh: wavfile.write(fh, rate, data))


def atomic_write(path, writer) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

"""Synthetic stand-ins for labelled speech corpora."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dsrlab.nn.train import SequenceDataset


def segment_labels(length: int, n_classes: int, rng, min_dur: int = 3, max_dur: int = 10) -> np.ndarray:
    """Piecewise-constant label track with random segment durations."""
    labels = np.empty(length, dtype=np.int64)
    pos = 0
    while pos < length:
        dur = int(rng.integers(min_dur, max_dur + 1))
        labels[pos : pos + dur] = rng.integers(n_classes)
        pos += dur
    return labels


def frame_classification_task(n_utts: int, n_classes: int = 6, dim: int = 8, seed: int = 0,
                              min_len: int = 20, max_len: int = 60, noise: float = 1.0,
                              task_seed: int = 0):
    """Utterances whose frames are noisy class means (one label per frame).

    ``task_seed`` fixes the class means, so train and dev sets drawn with
    different ``seed`` values share one underlying task.
    """
    means = np.random.default_rng(task_seed).standard_normal((n_classes, dim)) * 1.5
    rng = np.random.default_rng([task_seed, seed])
    xs, ys = [], []
    for _ in range(n_utts):
        t = int(rng.integers(min_len, max_len + 1))
        y = segment_labels(t, n_classes, rng)
        xs.append(means[y] + noise * rng.standard_normal((t, dim)))
        ys.append(y)
    return SequenceDataset(xs, ys)


@dataclass
class JointTask:
    """Frame-level data for speech enhancement plus recognition.

    ``clean`` and ``noisy`` are lists of (T, d) feature sequences; ``labels``
    are context-dependent class ids and ``mono`` their coarse groups.
    """

    clean: list
    noisy: list
    labels: list
    mono: list
    n_classes: int
    n_mono: int
    dim: int


def joint_task(n_utts: int, n_classes: int = 12, n_mono: int = 4, dim: int = 4, seed: int = 0,
               min_len: int = 40, max_len: int = 80, fir_taps: int = 4, noise: float = 0.6,
               task_seed: int = 0) -> JointTask:
    """Class-conditioned Gaussian sequences corrupted by a random FIR and noise.

    Each class belongs to monophone group ``class % n_mono``. The noisy stream
    is the clean stream smeared over time by a fixed decaying FIR (the same
    for all utterances, a stand-in for reverberation) plus white noise.
    Class means and the FIR depend on ``task_seed`` only.
    """
    task_rng = np.random.default_rng(task_seed)
    means = task_rng.standard_normal((n_classes, dim))
    fir = np.exp(-np.arange(fir_taps) / 1.5) * task_rng.uniform(0.5, 1.0, fir_taps)
    fir[0] = 1.0
    rng = np.random.default_rng([task_seed, seed])
    clean, noisy, labels, mono = [], [], [], []
    for _ in range(n_utts):
        t = int(rng.integers(min_len, max_len + 1))
        y = segment_labels(t, n_classes, rng)
        c = means[y] + 0.3 * rng.standard_normal((t, dim))
        smeared = np.zeros_like(c)
        for k, w in enumerate(fir):
            smeared[k:] += w * c[: t - k]
        smeared /= np.sqrt(np.sum(fir**2))
        clean.append(c)
        noisy.append(smeared + noise * rng.standard_normal((t, dim)))
        labels.append(y)
        mono.append(y % n_mono)
    return JointTask(clean, noisy, labels, mono, n_classes, n_mono, dim)

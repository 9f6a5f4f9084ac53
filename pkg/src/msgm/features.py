"""Two-level temporal segmentation and relative band power (rPSD) features."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import welch

BANDS: tuple[tuple[str, float, float], ...] = (
    ("delta", 1.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 12.0),
    ("low_beta", 12.0, 16.0),
    ("beta", 16.0, 20.0),
    ("high_beta", 20.0, 28.0),
    ("gamma", 30.0, 45.0),
)
BAND_NAMES = tuple(b[0] for b in BANDS)
N_BANDS = len(BANDS)
MIN_FS = 90.0
WELCH_NPERSEG = 256


class SegmentationError(ValueError):
    pass


class IngestionError(ValueError):
    pass


@dataclass
class Recording:
    data: np.ndarray  # channels x samples
    fs: float
    subject_id: int = 0
    trial_id: int = 0
    label: int = 0
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"recording data must be channels x samples, got {self.data.shape}")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("recording contains non-finite samples")
        self.channel_names = tuple(self.channel_names)
        if self.channel_names and len(self.channel_names) != self.n_channels:
            raise ValueError(f"{len(self.channel_names)} channel names for {self.n_channels} channels")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs


@dataclass(frozen=True)
class ScaleSpec:
    """First-level window/hop and the second-level (window, hop) pairs, in seconds."""

    first_len: float = 20.0
    first_hop: float = 4.0
    windows: tuple[tuple[float, float], ...] = ((4.0, 2.0), (8.0, 4.0), (12.0, 6.0))

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple((float(a), float(b)) for a, b in self.windows))
        if not self.windows:
            raise SegmentationError("at least one second-level window is required")
        if not (self.first_len > 0 and self.first_hop > 0):
            raise SegmentationError("first-level window and hop must be positive")
        for wl, ws in self.windows:
            if not 0 < wl <= self.first_len:
                raise SegmentationError(f"window {wl}s must lie in (0, {self.first_len}]s")
            if not 0 < ws <= wl:
                raise SegmentationError(f"hop {ws}s must lie in (0, {wl}]s")

    def n_segments(self, k: int) -> int:
        wl, ws = self.windows[k]
        return int(np.floor((self.first_len - wl) / ws + 1e-9)) + 1

    @property
    def n_scales(self) -> int:
        return len(self.windows)


@dataclass
class FeatureTensor:
    """rPSD values for one scale, shaped ``(b, n_k, c, 7)``."""

    k: int
    values: np.ndarray
    bands: tuple[tuple[str, float, float], ...] = BANDS

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class FeatureSet:
    """Per-scale feature tensors plus per-sample metadata (one sample per first-level segment)."""

    spec: ScaleSpec
    tensors: list[FeatureTensor]
    labels: np.ndarray
    subjects: np.ndarray
    trials: np.ndarray
    channel_names: tuple[str, ...] = ()
    fs: float | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(
            spec=self.spec,
            tensors=[FeatureTensor(t.k, t.values[idx]) for t in self.tensors],
            labels=self.labels[idx],
            subjects=self.subjects[idx],
            trials=self.trials[idx],
            channel_names=self.channel_names,
            fs=self.fs,
        )

    def arrays(self) -> list[np.ndarray]:
        return [t.values for t in self.tensors]


def _samples(seconds: float, fs: float) -> int:
    return int(round(seconds * fs))


def segment_first_level(rec: Recording, l: float = 20.0, s: float = 4.0) -> list[np.ndarray]:
    """Overlapping ``l``-second windows every ``s`` seconds; the uncovered tail is dropped."""
    win, hop = _samples(l, rec.fs), _samples(s, rec.fs)
    if rec.n_samples < win:
        raise SegmentationError(
            f"recording has {rec.n_samples} samples; at least {win} ({l} s at {rec.fs} Hz) required"
        )
    n = (rec.n_samples - win) // hop + 1
    return [rec.data[:, i * hop:i * hop + win] for i in range(n)]


def segment_second_level(seg: np.ndarray, window: tuple[float, float], fs: float) -> list[np.ndarray]:
    wl, ws = window
    win, hop = _samples(wl, fs), _samples(ws, fs)
    if win > seg.shape[-1]:
        raise SegmentationError(f"window {wl} s exceeds the {seg.shape[-1] / fs} s segment")
    n = (seg.shape[-1] - win) // hop + 1
    return [seg[..., i * hop:i * hop + win] for i in range(n)]


def _band_masks(freqs: np.ndarray) -> np.ndarray:
    return np.stack([(freqs >= lo) & (freqs < hi) for _, lo, hi in BANDS])


def rpsd(sub: np.ndarray, fs: float) -> np.ndarray:
    """Relative band power of each channel, shape ``(..., c, 7)``.

    Welch estimate (Hann, ``min(256, n)``-sample segments, 50% overlap, mean
    averaging); band power sums bins whose centre lies in ``[lo, hi)`` and is
    normalised by the total over the seven bands. Channels with no band power
    get a uniform vector.
    """
    sub = np.asarray(sub, dtype=np.float64)
    if fs < MIN_FS:
        raise ValueError(f"fs={fs} Hz cannot resolve the 30-45 Hz band (need >= {MIN_FS} Hz)")
    n = sub.shape[-1]
    if n < 2:
        raise ValueError("sub-segment needs at least two samples")
    nperseg = min(WELCH_NPERSEG, n)
    freqs, psd = welch(sub, fs=fs, window="hann", nperseg=nperseg, noverlap=nperseg // 2,
                       average="mean", axis=-1)
    power = psd @ _band_masks(freqs).T.astype(np.float64)
    total = power.sum(axis=-1, keepdims=True)
    dead = total <= np.finfo(np.float64).tiny * 1e3
    out = np.where(dead, 1.0 / N_BANDS, power / np.where(dead, 1.0, total))
    return out


def _check_homogeneous(recs: Sequence[Recording]) -> None:
    chans = {r.n_channels for r in recs}
    rates = {float(r.fs) for r in recs}
    if len(chans) > 1 or len(rates) > 1:
        raise IngestionError(f"recordings disagree on channels {sorted(chans)} or fs {sorted(rates)}")


def build_feature_tensors(recs: Sequence[Recording], spec: ScaleSpec) -> list[FeatureTensor]:
    return extract_features(recs, spec).tensors


def extract_features(recs: Sequence[Recording], spec: ScaleSpec) -> FeatureSet:
    """First-level segment every recording, then build one tensor per scale.

    Sample order is recording order, then segment order within a recording.
    """
    recs = list(recs)
    if not recs:
        return FeatureSet(spec, [], np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))
    _check_homogeneous(recs)
    fs = float(recs[0].fs)
    per_scale: list[list[np.ndarray]] = [[] for _ in spec.windows]
    labels, subjects, trials = [], [], []
    for rec in recs:
        segs = np.stack(segment_first_level(rec, spec.first_len, spec.first_hop))  # m, c, l
        for k, window in enumerate(spec.windows):
            subs = np.stack(segment_second_level(segs, window, fs), axis=1)  # m, n_k, c, l'
            per_scale[k].append(rpsd(subs, fs))
        labels += [rec.label] * len(segs)
        subjects += [rec.subject_id] * len(segs)
        trials += [rec.trial_id] * len(segs)
    names = recs[0].channel_names
    return FeatureSet(
        spec=spec,
        tensors=[FeatureTensor(k, np.concatenate(v)) for k, v in enumerate(per_scale)],
        labels=np.asarray(labels, dtype=np.int64),
        subjects=np.asarray(subjects, dtype=np.int64),
        trials=np.asarray(trials, dtype=np.int64),
        channel_names=names,
        fs=fs,
    )


def write_feature_csv(ft: FeatureTensor, path: str | Path, channel_names: Sequence[str] = ()) -> int:
    """One row per (batch, segment, channel); returns the row count."""
    b, n, c, _ = ft.values.shape
    names = list(channel_names) if channel_names else [str(i) for i in range(c)]
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "segment", "channel"] + list(BAND_NAMES))
        for i in range(b):
            for t in range(n):
                for ch in range(c):
                    w.writerow([i, t, names[ch]] + [repr(float(x)) for x in ft.values[i, t, ch]])
                    rows += 1
    return rows

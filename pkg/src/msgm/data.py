"""EEGB recording files, JSON manifests and synthetic EEG generation.

EEGB layout (little-endian)::

    offset 0   4 bytes  magic b"EEGB"
    offset 4   u16      version (1)
    offset 6   u16      channel count c
    offset 8   u64      samples per channel L
    offset 16  f64      sampling rate (Hz)
    offset 24  f32[c*L] channel-major samples
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import IngestionError, Recording

EEGB_MAGIC = b"EEGB"
EEGB_VERSION = 1
_HEADER = struct.Struct("<4sHHQd")
HEADER_SIZE = _HEADER.size  # 24

# 32-channel 10-20 montage; synthetic data uses a prefix-free subset of it
MONTAGE_32 = ("FP1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3", "P7", "PO3", "O1", "OZ",
              "PZ", "FP2", "AF4", "FZ", "F4", "F8", "FC6", "FC2", "CZ", "C4", "T8", "CP6", "CP2", "P4", "P8",
              "PO4", "O2")
SYNTH_CHANNELS_16 = ("FP1", "FP2", "F3", "F4", "FZ", "FC1", "FC2", "T7", "T8", "C3", "C4", "CP1", "CP2",
                     "P3", "P4", "O1")


class FormatError(ValueError):
    pass


def write_eegb(path: str | Path, rec: Recording) -> None:
    c, L = rec.data.shape
    if c > 0xFFFF:
        raise FormatError(f"{c} channels exceed the u16 channel field")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EEGB_MAGIC, EEGB_VERSION, c, L, float(rec.fs)))
        fh.write(np.ascontiguousarray(rec.data, dtype="<f4").tobytes())


def read_eegb(path: str | Path, **meta) -> Recording:
    """Read an EEGB file; ``meta`` fills the non-signal Recording fields."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: header truncated, expected {HEADER_SIZE} bytes at offset 0, found {len(raw)}")
    magic, version, c, L, fs = _HEADER.unpack_from(raw, 0)
    if magic != EEGB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != EEGB_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    expected = c * L * 4
    actual = len(raw) - HEADER_SIZE
    if actual != expected:
        raise FormatError(
            f"{path}: payload at offset {HEADER_SIZE} should be {expected} bytes (c={c}, L={L}), found {actual}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(c, L).astype(np.float64)
    return Recording(data=data, fs=fs, **meta)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def load_manifest(path: str | Path, n_classes: int | None = None) -> list[Recording]:
    """Open and validate every recording listed in a manifest.

    All problems are collected and reported together in one IngestionError.
    """
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except FileNotFoundError:
        raise IngestionError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(entries, list):
        raise IngestionError(f"{path}: manifest must be a JSON list")
    problems: list[str] = []
    recs: list[Recording] = []
    seen: dict[tuple[int, int], int] = {}
    for i, e in enumerate(entries):
        try:
            fpath = Path(e["path"])
            meta = dict(subject_id=int(e["subject_id"]), trial_id=int(e["trial_id"]), label=int(e["label"]))
            names = tuple(e.get("channel_names", ()))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"entry {i}: malformed ({exc})")
            continue
        if not fpath.is_absolute():
            fpath = path.parent / fpath
        key = (meta["subject_id"], meta["trial_id"])
        if key in seen:
            problems.append(f"entry {i}: duplicate subject {key[0]} trial {key[1]} (first at entry {seen[key]})")
            continue
        seen[key] = i
        if n_classes is not None and not 0 <= meta["label"] < n_classes:
            problems.append(f"{e['path']}: label {meta['label']} outside [0, {n_classes})")
            continue
        if not fpath.exists():
            problems.append(f"missing file: {e['path']}")
            continue
        try:
            rec = read_eegb(fpath, **meta)
        except FormatError as exc:
            problems.append(str(exc))
            continue
        if names and len(names) != rec.n_channels:
            problems.append(f"{e['path']}: {len(names)} channel names for {rec.n_channels} channels")
            continue
        rec.channel_names = names
        recs.append(rec)
    if recs:
        ref = recs[0]
        odd = [f"subject {r.subject_id} trial {r.trial_id}" for r in recs
               if r.n_channels != ref.n_channels or r.fs != ref.fs or r.channel_names != ref.channel_names]
        if odd:
            problems.append(f"recordings differ from the first in channels or fs: {', '.join(odd)}")
    if problems:
        raise IngestionError("manifest ingestion failed:\n  " + "\n  ".join(problems))
    return recs


def write_dataset(recs: Sequence[Recording], out_dir: str | Path) -> Path:
    """Write one EEGB per recording plus ``manifest.json`` (relative paths)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = manifest_entries(recs)
    for rec, entry in zip(recs, entries):
        write_eegb(out_dir / entry["path"], rec)
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest


# ---------------------------------------------------------------------------
# Synthetic EEG
# ---------------------------------------------------------------------------

# relative sinusoid amplitude per band (delta..gamma)
BASE_BAND_AMPLITUDE = (1.0, 0.8, 0.6, 0.45, 0.4, 0.3, 0.2)
BAND_EDGES = ((1, 4), (4, 8), (8, 12), (12, 16), (16, 20), (20, 28), (30, 45))
ALPHA = 2


@dataclass(frozen=True)
class SyntheticSpec:
    subjects: int = 8
    trials_per_subject: int = 6
    duration: float = 60.0
    fs: float = 128.0
    channel_names: tuple[str, ...] = SYNTH_CHANNELS_16
    n_classes: int = 2
    alpha_gain: float = 4.0  # class-1 alpha power factor on boosted channels
    boosted_channels: tuple[str, ...] = ("P3", "P4", "O1", "CP1", "CP2")
    gain_jitter: float = 0.3  # log-sd of per-subject, per-channel amplitude
    subject_alpha_jitter: float = 0.25  # log-sd of per-subject alpha power
    noise_floor: float = 0.5  # colored-noise std relative to the delta sinusoid amplitude
    tones_per_band: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        object.__setattr__(self, "boosted_channels", tuple(self.boosted_channels))
        if self.fs < 128:
            raise ValueError("synthetic fs must be >= 128 Hz")
        unknown = set(self.boosted_channels) - set(self.channel_names)
        if unknown:
            raise ValueError(f"boosted channels not in montage: {sorted(unknown)}")

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        extra = set(doc) - {f.name for f in fields(cls)}
        if extra:
            raise ValueError(f"unknown synthetic config keys: {sorted(extra)}")
        return cls(**doc)

    def to_json(self) -> dict:
        d = asdict(self)
        d["channel_names"] = list(self.channel_names)
        d["boosted_channels"] = list(self.boosted_channels)
        return d


def pink_noise(rng: np.random.Generator, shape: tuple[int, ...], fs: float) -> np.ndarray:
    """Unit-variance 1/f noise along the last axis."""
    n = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    f[0] = f[1]
    x = np.fft.irfft(spec / np.sqrt(f), n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> list[Recording]:
    """Class-conditional band-power EEG; labels alternate by trial so every subject is balanced."""
    rng = np.random.default_rng(seed)
    c = len(spec.channel_names)
    L = int(round(spec.duration * spec.fs))
    t = np.arange(L) / spec.fs
    boosted = np.array([ch in spec.boosted_channels for ch in spec.channel_names])
    recs = []
    for s in range(spec.subjects):
        gain = np.exp(spec.gain_jitter * rng.standard_normal(c))
        subj_alpha = np.exp(spec.subject_alpha_jitter * rng.standard_normal())
        for trial in range(spec.trials_per_subject):
            label = trial % spec.n_classes
            x = np.zeros((c, L))
            for band, ((lo, hi), amp) in enumerate(zip(BAND_EDGES, BASE_BAND_AMPLITUDE)):
                a = np.full(c, amp)
                if band == ALPHA:
                    a = a * np.sqrt(subj_alpha)
                    if label == 1:
                        a = np.where(boosted, a * np.sqrt(spec.alpha_gain), a)
                freqs = rng.uniform(lo + 0.5, hi - 0.5, (c, spec.tones_per_band))
                phases = rng.uniform(0, 2 * np.pi, (c, spec.tones_per_band))
                tones = np.sin(2 * np.pi * freqs[..., None] * t + phases[..., None]).sum(axis=1)
                x += a[:, None] * tones / np.sqrt(spec.tones_per_band)
            shared = pink_noise(rng, (1, L), spec.fs)
            own = pink_noise(rng, (c, L), spec.fs)
            x += spec.noise_floor * (0.5 * shared + own)
            data = (gain[:, None] * x).astype(np.float32).astype(np.float64)
            recs.append(Recording(data, spec.fs, subject_id=s, trial_id=trial, label=label,
                                  channel_names=spec.channel_names))
    return recs


def manifest_entries(recs: Sequence[Recording]) -> list[dict]:
    return [{"path": f"sub{r.subject_id:03d}_trial{r.trial_id:03d}.eegb", "subject_id": r.subject_id,
             "trial_id": r.trial_id, "label": r.label, "channel_names": list(r.channel_names)} for r in recs]

import json

import numpy as np
import pytest

from msgm.data import (
    HEADER_SIZE,
    FormatError,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    read_eegb,
    write_dataset,
    write_eegb,
)
from msgm.features import BAND_NAMES, IngestionError, Recording, rpsd

ALPHA = BAND_NAMES.index("alpha")


def recording(c=3, L=400, fs=200.0, seed=0, **kw):
    data = np.random.default_rng(seed).standard_normal((c, L)).astype(np.float32).astype(np.float64)
    kw.setdefault("subject_id", 0)
    kw.setdefault("trial_id", 0)
    kw.setdefault("label", 0)
    return Recording(data, fs, **kw)


class TestEegb:
    def test_roundtrip_exact(self, tmp_path):
        rec = recording()
        write_eegb(tmp_path / "a.eegb", rec)
        back = read_eegb(tmp_path / "a.eegb", subject_id=0, trial_id=0, label=0)
        np.testing.assert_array_equal(back.data, rec.data)
        assert back.fs == rec.fs

    def test_file_size(self, tmp_path):
        rec = Recording(np.zeros((62, 60 * 200)), 200.0, subject_id=0, trial_id=0, label=0)
        write_eegb(tmp_path / "a.eegb", rec)
        assert HEADER_SIZE == 24
        assert (tmp_path / "a.eegb").stat().st_size == 24 + 62 * 12000 * 4

    def test_truncated_payload(self, tmp_path):
        write_eegb(tmp_path / "a.eegb", recording(c=2, L=100))
        raw = (tmp_path / "a.eegb").read_bytes()
        (tmp_path / "a.eegb").write_bytes(raw[:-10])
        with pytest.raises(FormatError, match=r"800 bytes.*found 790"):
            read_eegb(tmp_path / "a.eegb", subject_id=0, trial_id=0, label=0)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.eegb").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(FormatError, match="magic"):
            read_eegb(tmp_path / "x.eegb", subject_id=0, trial_id=0, label=0)


class TestManifest:
    def write(self, tmp_path, n=10):
        recs = [recording(subject_id=i // 2, trial_id=i % 2, label=i % 2, seed=i) for i in range(n)]
        return write_dataset(recs, tmp_path), recs

    def test_roundtrip(self, tmp_path):
        manifest, recs = self.write(tmp_path)
        back = load_manifest(manifest, 2)
        assert [(r.subject_id, r.trial_id, r.label) for r in back] == [(r.subject_id, r.trial_id, r.label) for r in recs]

    def test_empty_list(self, tmp_path):
        (tmp_path / "m.json").write_text("[]")
        assert load_manifest(tmp_path / "m.json") == []

    def test_one_bad_path_named(self, tmp_path):
        manifest, _ = self.write(tmp_path)
        entries = json.loads(manifest.read_text())
        entries[4]["path"] = "missing_file.eegb"
        manifest.write_text(json.dumps(entries))
        with pytest.raises(IngestionError) as err:
            load_manifest(manifest)
        msg = str(err.value)
        assert "missing_file.eegb" in msg
        assert sum(e["path"] in msg for e in entries) == 1

    def test_duplicates_rejected(self, tmp_path):
        manifest, _ = self.write(tmp_path, 4)
        entries = json.loads(manifest.read_text())
        entries[1]["subject_id"], entries[1]["trial_id"] = entries[0]["subject_id"], entries[0]["trial_id"]
        manifest.write_text(json.dumps(entries))
        with pytest.raises(IngestionError, match="duplicate"):
            load_manifest(manifest)

    def test_label_range(self, tmp_path):
        manifest, _ = self.write(tmp_path, 4)
        entries = json.loads(manifest.read_text())
        entries[2]["label"] = 5
        manifest.write_text(json.dumps(entries))
        with pytest.raises(IngestionError, match="label 5"):
            load_manifest(manifest, 2)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IngestionError, match="not found"):
            load_manifest(tmp_path / "nope.json")

    def test_all_problems_reported_together(self, tmp_path):
        manifest, _ = self.write(tmp_path, 4)
        entries = json.loads(manifest.read_text())
        entries[0]["path"] = "gone.eegb"
        entries[3]["label"] = 9
        manifest.write_text(json.dumps(entries))
        with pytest.raises(IngestionError) as err:
            load_manifest(manifest, 2)
        assert "gone.eegb" in str(err.value) and "label 9" in str(err.value)


def class_alpha(recs, channels):
    """Mean alpha rPSD per class over the named channels, 4 s sub-windows."""
    out = {0: [], 1: []}
    for r in recs:
        idx = [r.channel_names.index(ch) for ch in channels]
        x = r.data[idx, : int(4 * r.fs)]
        out[r.label].append(rpsd(x, r.fs)[:, ALPHA].mean())
    return np.mean(out[1]) - np.mean(out[0])


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        spec = SyntheticSpec(subjects=2, trials_per_subject=2, duration=20)
        a = write_dataset(generate_synthetic(spec, 3), tmp_path / "a")
        b = write_dataset(generate_synthetic(spec, 3), tmp_path / "b")
        for entry in json.loads(a.read_text()):
            assert (a.parent / entry["path"]).read_bytes() == (b.parent / entry["path"]).read_bytes()

    def test_no_gain_no_difference(self):
        spec = SyntheticSpec(subjects=20, trials_per_subject=10, duration=8, alpha_gain=1.0)
        assert abs(class_alpha(generate_synthetic(spec, 0), spec.boosted_channels)) < 0.02

    def test_gain_four_separates(self):
        spec = SyntheticSpec(subjects=20, trials_per_subject=10, duration=8, alpha_gain=4.0)
        assert class_alpha(generate_synthetic(spec, 0), spec.boosted_channels) >= 0.1

    def test_balanced_labels(self):
        recs = generate_synthetic(SyntheticSpec(subjects=3, trials_per_subject=4, duration=20), 0)
        for s in range(3):
            assert sorted(r.label for r in recs if r.subject_id == s) == [0, 0, 1, 1]

    def test_unknown_boosted_channel(self):
        with pytest.raises(ValueError):
            SyntheticSpec(boosted_channels=("XX",))

    def test_threshold_oracle_separates_classes(self):
        """A one-feature, cross-subject threshold rule already does well on the default dataset."""
        spec = SyntheticSpec()
        recs = generate_synthetic(spec, 0)
        feats = np.array([np.mean([rpsd(r.data[[r.channel_names.index(c) for c in spec.boosted_channels],
                                                 i * 512:(i + 1) * 512], r.fs)[:, ALPHA].mean()
                                   for i in range(15)]) for r in recs])
        labels = np.array([r.label for r in recs])
        subjects = np.array([r.subject_id for r in recs])
        correct = 0
        for s in np.unique(subjects):
            train = subjects != s
            thr = (feats[train & (labels == 0)].mean() + feats[train & (labels == 1)].mean()) / 2
            correct += np.sum((feats[~train] > thr) == labels[~train])
        assert correct / len(recs) > 0.9

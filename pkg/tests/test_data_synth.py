import struct

import numpy as np
import numpy.testing as npt
import pytest

from metadapt.data_synth import (
    HEADER,
    MAGIC,
    SynthConfig,
    gen_subjects,
    load_dataset,
    read_subject,
    subject_mixing,
    write_dataset,
    write_subject,
)
from metadapt.errors import ConfigError, DataError, FormatError

SMALL_CFG = SynthConfig(n_subjects=2, trials_per_subject=40, seed=11)


class TestSynthConfig:
    def test_defaults_valid(self):
        cfg = SynthConfig()
        assert cfg.trial_seconds == 2.0

    def test_nyquist(self):
        with pytest.raises(ConfigError):
            SynthConfig(class_freqs=(6.0, 12.0, 18.0, 70.0))

    def test_frequency_separation_vs_jitter(self):
        with pytest.raises(ConfigError):
            SynthConfig(class_freqs=(6.0, 8.0, 18.0, 24.0), jitter=1.0)

    def test_trials_divisible_by_classes(self):
        with pytest.raises(ConfigError):
            SynthConfig(trials_per_subject=202)

    def test_freq_count_matches_classes(self):
        with pytest.raises(ConfigError):
            SynthConfig(n_classes=3)


class TestGeneration:
    def test_deterministic(self):
        a = gen_subjects(SMALL_CFG)
        b = gen_subjects(SMALL_CFG)
        for da, db in zip(a, b):
            assert (da.trials == db.trials).all()
            assert (da.labels == db.labels).all()
            assert (da.train_idx == db.train_idx).all()
            assert (da.eval_idx == db.eval_idx).all()

    def test_label_histogram_uniform(self):
        for ds in gen_subjects(SMALL_CFG):
            counts = np.bincount(ds.labels, minlength=4)
            assert (counts == 10).all()

    def test_distinct_mixing_matrices(self):
        cfg = SynthConfig(n_subjects=5, trials_per_subject=8, seed=3)
        mats = [subject_mixing(cfg, i) for i in range(cfg.n_subjects)]
        for i in range(len(mats)):
            for j in range(i + 1, len(mats)):
                assert np.linalg.norm(mats[i] - mats[j]) > 0

    def test_splits_disjoint_and_balanced(self):
        for ds in gen_subjects(SMALL_CFG):
            assert np.intersect1d(ds.train_idx, ds.eval_idx).size == 0
            assert ds.train_idx.size + ds.eval_idx.size == 40
            ev = np.bincount(ds.labels[ds.eval_idx], minlength=4)
            assert (ev == 2).all()

    def test_data_is_float32_representable(self):
        ds = gen_subjects(SMALL_CFG)[0]
        npt.assert_array_equal(ds.trials, ds.trials.astype(np.float32).astype(np.float64))

    def test_subject_ids(self):
        ids = [s.subject_id for s in gen_subjects(SMALL_CFG)]
        assert ids == ["s00", "s01"]


def band_power_features(trials, fs, freqs, half_width=2.0):
    x = trials[:, 0]
    power = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    bins = np.fft.rfftfreq(x.shape[-1], d=1.0 / fs)
    feats = []
    for f in freqs:
        band = (bins >= f - half_width) & (bins <= f + half_width)
        feats.append(power[:, :, band].sum(axis=-1))
    return np.concatenate(feats, axis=1)


def test_band_power_linear_oracle_is_over_ninety_percent():
    # the generated task must be learnable: least-squares one-vs-rest on
    # band-power features separates classes within each subject
    cfg = SynthConfig(n_subjects=2, trials_per_subject=200, seed=7)
    for ds in gen_subjects(cfg):
        feats = band_power_features(ds.trials, cfg.fs, cfg.class_freqs)
        mu = feats[ds.train_idx].mean(axis=0)
        sd = feats[ds.train_idx].std(axis=0) + 1e-12
        z = (feats - mu) / sd
        a = np.hstack([z, np.ones((z.shape[0], 1))])
        onehot = np.eye(cfg.n_classes)[ds.labels]
        w, *_ = np.linalg.lstsq(a[ds.train_idx], onehot[ds.train_idx], rcond=None)
        pred = a[ds.eval_idx] @ w
        acc = (pred.argmax(axis=1) == ds.labels[ds.eval_idx]).mean()
        assert acc > 0.9, f"{ds.subject_id}: linear oracle accuracy {acc:.3f}"


class TestSubjectFile:
    def test_round_trip_bitwise(self, tmp_path):
        ds = gen_subjects(SMALL_CFG)[0]
        path = str(tmp_path / "s00.eegb")
        write_subject(ds, path)
        back = read_subject(path, train_idx=ds.train_idx, eval_idx=ds.eval_idx)
        assert (back.trials == ds.trials).all()
        assert (back.labels == ds.labels).all()
        assert back.n_classes == ds.n_classes
        assert back.subject_id == "s00"

    def test_file_size_arithmetic(self, tmp_path):
        ds = gen_subjects(SMALL_CFG)[0]
        path = tmp_path / "s.eegb"
        write_subject(ds, str(path))
        n, _, c, t = ds.trials.shape
        assert path.stat().st_size == 24 + 2 * n + 4 * n * c * t

    def test_atomic_overwrite(self, tmp_path):
        subjects = gen_subjects(SMALL_CFG)
        path = str(tmp_path / "s.eegb")
        write_subject(subjects[0], path)
        write_subject(subjects[1], path)
        back = read_subject(path, train_idx=subjects[1].train_idx,
                            eval_idx=subjects[1].eval_idx)
        assert (back.trials == subjects[1].trials).all()
        assert not [p for p in tmp_path.iterdir() if p.name.startswith(".eegb-")]

    def test_default_split_rule(self, tmp_path):
        ds = gen_subjects(SMALL_CFG)[0]
        path = str(tmp_path / "s.eegb")
        write_subject(ds, path)
        back = read_subject(path)
        assert np.intersect1d(back.train_idx, back.eval_idx).size == 0
        ev_counts = np.bincount(back.labels[back.eval_idx], minlength=4)
        assert (ev_counts == 2).all()
        # order-based rule: eval indices are the last of each class
        for c in range(4):
            idx = np.flatnonzero(back.labels == c)
            assert set(idx[-2:]) <= set(back.eval_idx.tolist())

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.eegb"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(FormatError):
            read_subject(str(path))

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.eegb"
        path.write_bytes(HEADER.pack(MAGIC, 9, 1, 1, 1, 2) + b"\x00" * 6)
        with pytest.raises(FormatError):
            read_subject(str(path))

    def test_truncated(self, tmp_path):
        ds = gen_subjects(SMALL_CFG)[0]
        path = tmp_path / "t.eegb"
        write_subject(ds, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(FormatError):
            read_subject(str(path))

    def test_zero_trials_rejected(self, tmp_path):
        path = tmp_path / "z.eegb"
        path.write_bytes(HEADER.pack(MAGIC, 1, 0, 8, 256, 4))
        with pytest.raises(DataError):
            read_subject(str(path))

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "l.eegb"
        blob = HEADER.pack(MAGIC, 1, 1, 1, 2, 2)
        blob += struct.pack("<H", 5)            # label 5 with n_classes 2
        blob += struct.pack("<2f", 0.0, 0.0)
        path.write_bytes(blob)
        with pytest.raises(DataError):
            read_subject(str(path))

    def test_split_indices_must_come_together(self, tmp_path):
        ds = gen_subjects(SMALL_CFG)[0]
        path = str(tmp_path / "s.eegb")
        write_subject(ds, path)
        with pytest.raises(DataError):
            read_subject(path, train_idx=ds.train_idx)


class TestManifest:
    def test_dataset_round_trip(self, tmp_path):
        subjects = gen_subjects(SMALL_CFG)
        manifest_path = write_dataset(subjects, str(tmp_path / "data"),
                                      SMALL_CFG.trial_seconds)
        manifest, back = load_dataset(manifest_path)
        assert manifest["trial_seconds"] == 2.0
        assert [s.subject_id for s in back] == ["s00", "s01"]
        for orig, loaded in zip(subjects, back):
            assert (orig.trials == loaded.trials).all()
            assert (orig.train_idx == loaded.train_idx).all()
            assert (orig.eval_idx == loaded.eval_idx).all()

    def test_bad_manifest_json(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text("{not json")
        with pytest.raises(FormatError):
            load_dataset(str(p))

    def test_manifest_version_checked(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text('{"version": 99, "subjects": {}}')
        with pytest.raises(FormatError):
            load_dataset(str(p))

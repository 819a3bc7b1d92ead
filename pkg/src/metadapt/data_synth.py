"""Synthetic multi-subject EEG-like data and its on-disk format.

Each subject mixes a handful of oscillatory sources through a private
random mixing matrix. Class identity is carried by the source frequency
(shared across subjects), while the spatial mixing and a per-subject
frequency offset differ — so representations transfer across subjects but
a new subject still needs adaptation.

Subject files are little-endian binary: a 24-byte header (magic "EEGB",
version, n_trials, n_channels, n_samples, n_classes as u32), u16 labels,
then float32 trial data in [trial][channel][sample] order. A JSON manifest
maps subject ids to file paths and records trial duration and the
train/eval split indices.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import seeding
from .episodes import SubjectDataset, stratified_split
from .errors import ConfigError, DataError, FormatError

MAGIC = b"EEGB"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")   # magic, version, n_trials, C, T, n_classes


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 7
    n_classes: int = 4
    channels: int = 8
    samples: int = 256
    fs: float = 128.0
    trials_per_subject: int = 200
    sigma: float = 0.5
    class_freqs: Tuple[float, ...] = (6.0, 12.0, 18.0, 24.0)
    jitter: float = 1.0
    eval_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "n_classes", "channels", "samples",
                     "trials_per_subject"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth: {name} must be positive, got {getattr(self, name)}")
        if self.fs <= 0 or self.sigma < 0 or self.jitter < 0:
            raise ConfigError("synth: fs must be positive, sigma/jitter non-negative")
        if len(self.class_freqs) != self.n_classes:
            raise ConfigError(
                f"synth: {len(self.class_freqs)} class frequencies for "
                f"{self.n_classes} classes")
        nyquist = self.fs / 2.0
        for f in self.class_freqs:
            if not 0 < f < nyquist:
                raise ConfigError(f"synth: frequency {f} outside (0, {nyquist})")
        freqs = sorted(self.class_freqs)
        for a, b in zip(freqs, freqs[1:]):
            if b - a <= 2.0 * self.jitter:
                raise ConfigError(
                    f"synth: frequencies {a} and {b} closer than twice the "
                    f"jitter range {self.jitter}")
        if self.trials_per_subject % self.n_classes != 0:
            raise ConfigError(
                f"synth: trials_per_subject={self.trials_per_subject} not "
                f"divisible by n_classes={self.n_classes}")
        if not 0.0 < self.eval_frac < 1.0:
            raise ConfigError(f"synth: eval_frac must be in (0, 1), got {self.eval_frac}")

    @property
    def trial_seconds(self) -> float:
        return self.samples / self.fs


def subject_name(index: int) -> str:
    return f"s{index:02d}"


def subject_mixing(cfg: SynthConfig, index: int) -> np.ndarray:
    """The (channels x sources) mixing matrix of one subject.

    First draw of the subject's stream, so it matches what ``gen_subjects``
    used for that subject.
    """
    rng = seeding.derive(cfg.seed, seeding.SYNTH, index)
    return rng.normal(size=(cfg.channels, cfg.n_classes))


def _gen_one(cfg: SynthConfig, index: int) -> SubjectDataset:
    rng = seeding.derive(cfg.seed, seeding.SYNTH, index)
    n_sources = cfg.n_classes
    mixing = rng.normal(size=(cfg.channels, n_sources))
    delta = rng.uniform(-cfg.jitter, cfg.jitter)

    n = cfg.trials_per_subject
    labels = rng.permutation(np.arange(n) % cfg.n_classes).astype(np.int64)
    t_axis = np.arange(cfg.samples) / cfg.fs

    trials = np.empty((n, 1, cfg.channels, cfg.samples), dtype=np.float64)
    for i, c in enumerate(labels):
        sources = cfg.sigma * rng.normal(size=(n_sources, cfg.samples))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        freq = cfg.class_freqs[c] + delta
        sources[c] += np.sin(2.0 * np.pi * freq * t_axis + phase)
        x = mixing @ sources + cfg.sigma * rng.normal(size=(cfg.channels, cfg.samples))
        # quantize to float32 so in-memory data equals the on-disk format
        trials[i, 0] = x.astype(np.float32)

    train_idx, eval_idx = stratified_split(labels, cfg.eval_frac, rng)
    return SubjectDataset(subject_name(index), trials, labels, cfg.n_classes,
                          train_idx, eval_idx)


def gen_subjects(cfg: SynthConfig) -> List[SubjectDataset]:
    """All subjects of the configured cohort, each from its own seed stream."""
    return [_gen_one(cfg, i) for i in range(cfg.n_subjects)]


def write_subject(ds: SubjectDataset, path: str) -> None:
    """Write one subject file atomically (temp file + rename)."""
    n, _, channels, samples = ds.trials.shape
    if ds.n_classes > 0xFFFF or int(ds.labels.max(initial=0)) > 0xFFFF:
        raise DataError(f"{path}: labels do not fit the u16 label field")
    header = HEADER.pack(MAGIC, VERSION, n, channels, samples, ds.n_classes)
    labels = ds.labels.astype("<u2").tobytes()
    data = ds.trials[:, 0].astype("<f4").tobytes()

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".eegb-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(labels)
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _default_split(labels: np.ndarray, n_classes: int,
                   eval_frac: float = 0.2) -> Tuple[np.ndarray, np.ndarray]:
    """Order-based stratified split: the last fraction of each class is eval."""
    train_parts, eval_parts = [], []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        n_eval = max(1, int(round(idx.size * eval_frac)))
        if n_eval >= idx.size:
            raise DataError(f"class {c}: too few trials ({idx.size}) to split")
        eval_parts.append(idx[-n_eval:])
        train_parts.append(idx[:-n_eval])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(eval_parts))


def read_subject(path: str, subject_id: Optional[str] = None,
                 train_idx: Optional[Sequence[int]] = None,
                 eval_idx: Optional[Sequence[int]] = None) -> SubjectDataset:
    """Parse a subject file; without explicit split indices, the last 20%
    of each class (in trial order) becomes the eval split."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER.size:
        raise FormatError(f"{path}: file shorter than the 24-byte header")
    magic, version, n, channels, samples, n_classes = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if n == 0:
        raise DataError(f"{path}: empty dataset (0 trials)")
    if channels == 0 or samples == 0 or n_classes == 0:
        raise FormatError(f"{path}: zero-sized dimension in header")

    expected = HEADER.size + 2 * n + 4 * n * channels * samples
    if len(blob) != expected:
        raise FormatError(
            f"{path}: size {len(blob)} does not match header "
            f"(expected {expected} bytes)")

    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=HEADER.size)
    labels = labels.astype(np.int64)
    if labels.max() >= n_classes:
        raise DataError(
            f"{path}: label {labels.max()} outside [0, {n_classes})")
    data = np.frombuffer(blob, dtype="<f4", count=n * channels * samples,
                         offset=HEADER.size + 2 * n)
    trials = data.reshape(n, 1, channels, samples).astype(np.float64)

    if (train_idx is None) != (eval_idx is None):
        raise DataError(f"{path}: train and eval indices must come together")
    if train_idx is None:
        train_arr, eval_arr = _default_split(labels, n_classes)
    else:
        train_arr = np.asarray(train_idx, dtype=np.int64)
        eval_arr = np.asarray(eval_idx, dtype=np.int64)
    sid = subject_id if subject_id is not None else os.path.splitext(
        os.path.basename(path))[0]
    return SubjectDataset(sid, trials, labels, n_classes, train_arr, eval_arr)


def write_dataset(subjects: Sequence[SubjectDataset], out_dir: str,
                  trial_seconds: float) -> str:
    """Write every subject file plus the JSON manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries: Dict[str, dict] = {}
    for ds in subjects:
        fname = f"{ds.subject_id}.eegb"
        write_subject(ds, os.path.join(out_dir, fname))
        entries[ds.subject_id] = {
            "path": fname,
            "train_idx": ds.train_idx.tolist(),
            "eval_idx": ds.eval_idx.tolist(),
        }
    manifest = {
        "version": VERSION,
        "trial_seconds": trial_seconds,
        "subjects": entries,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, manifest_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return manifest_path


def load_dataset(manifest_path: str) -> Tuple[dict, List[SubjectDataset]]:
    """Read the manifest and every subject file it names."""
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON: {e}") from None
    if manifest.get("version") != VERSION:
        raise FormatError(
            f"{manifest_path}: unsupported manifest version {manifest.get('version')}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    subjects = []
    for sid in sorted(manifest["subjects"]):
        entry = manifest["subjects"][sid]
        subjects.append(read_subject(
            os.path.join(base, entry["path"]),
            subject_id=sid,
            train_idx=entry["train_idx"],
            eval_idx=entry["eval_idx"],
        ))
    return manifest, subjects

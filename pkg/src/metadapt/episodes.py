"""Meta-task ensemble construction and per-episode base/meta splits.

A meta task is a small stratified subset of trials drawn from a few
source subjects; an episode splits one task into a base part (T_b, drives
the inner prediction-head update) and a meta part (T_m, drives the outer
update of everything). Tasks hold indices into the source datasets, not
trial copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, StateError, UsageError


@dataclass
class SubjectDataset:
    """Labeled trials of one subject with a fixed train/eval split."""

    subject_id: str
    trials: np.ndarray          # (n, 1, C, T)
    labels: np.ndarray          # (n,) ints in [0, n_classes)
    n_classes: int
    train_idx: np.ndarray
    eval_idx: np.ndarray

    def __post_init__(self):
        self.trials = np.asarray(self.trials, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.eval_idx = np.asarray(self.eval_idx, dtype=np.int64)
        if self.trials.ndim != 4 or self.trials.shape[1] != 1:
            raise DataError(
                f"subject {self.subject_id}: trials must be (n, 1, C, T), "
                f"got {self.trials.shape}")
        n = self.trials.shape[0]
        if self.labels.shape != (n,):
            raise DataError(
                f"subject {self.subject_id}: {self.labels.shape[0]} labels "
                f"for {n} trials")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(
                f"subject {self.subject_id}: labels outside [0, {self.n_classes})")
        both = np.concatenate([self.train_idx, self.eval_idx])
        if both.size and (both.min() < 0 or both.max() >= n):
            raise DataError(f"subject {self.subject_id}: split index out of range")
        if np.intersect1d(self.train_idx, self.eval_idx).size:
            raise DataError(f"subject {self.subject_id}: train/eval splits overlap")
        present = set(self.labels[self.train_idx].tolist())
        if present != set(range(self.n_classes)):
            missing = sorted(set(range(self.n_classes)) - present)
            raise DataError(
                f"subject {self.subject_id}: classes {missing} absent from train split")

    @property
    def n_trials(self) -> int:
        return self.trials.shape[0]

    def train_indices_by_class(self) -> Dict[int, np.ndarray]:
        train_labels = self.labels[self.train_idx]
        return {
            c: self.train_idx[train_labels == c]
            for c in range(self.n_classes)
        }


@dataclass(frozen=True)
class MetaTask:
    """m trial references drawn from exactly ``len(subject_ids)`` subjects."""

    subject_pos: np.ndarray     # (m,) index into the sources list
    trial_idx: np.ndarray       # (m,) index into that subject's trials
    labels: np.ndarray          # (m,)
    subject_ids: Tuple[str, ...]

    @property
    def m(self) -> int:
        return self.subject_pos.shape[0]


@dataclass(frozen=True)
class EpisodeSplit:
    base_idx: np.ndarray        # p positions into the task's sample list
    meta_idx: np.ndarray        # q positions


def stratified_split(labels: np.ndarray, eval_frac: float,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split into (train_idx, eval_idx)."""
    if not 0.0 < eval_frac < 1.0:
        raise ConfigError(f"eval_frac must be in (0, 1), got {eval_frac}")
    labels = np.asarray(labels)
    train_parts, eval_parts = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_eval = max(1, int(round(idx.size * eval_frac)))
        if n_eval >= idx.size:
            raise DataError(f"class {c}: too few samples ({idx.size}) to split")
        eval_parts.append(idx[:n_eval])
        train_parts.append(idx[n_eval:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(eval_parts))


def build_meta_ensemble(sources: Sequence[SubjectDataset], n_tasks: int,
                        m: int, l: int, seed) -> List[MetaTask]:
    """Sample ``n_tasks`` stratified tasks of ``m`` trials over ``l`` subjects.

    Each task picks l of the L source subjects uniformly without
    replacement, then fills m slots round-robin over (class, subject) so
    per-class counts differ by at most one and every picked subject
    contributes. Only train-split trials are eligible.
    """
    big_l = len(sources)
    if big_l == 0:
        raise ConfigError("ensemble: no source subjects")
    if not 1 <= l < big_l:
        raise ConfigError(f"ensemble: need 1 <= l < L, got l={l}, L={big_l}")
    if n_tasks < 1 or m < 1:
        raise ConfigError(f"ensemble: n_tasks={n_tasks} and m={m} must be positive")
    n_classes = sources[0].n_classes
    for s in sources:
        if s.n_classes != n_classes:
            raise DataError(
                f"ensemble: subject {s.subject_id} has {s.n_classes} classes, "
                f"expected {n_classes}")

    pools = [s.train_indices_by_class() for s in sources]
    rng = np.random.default_rng(seed)
    tasks: List[MetaTask] = []
    for _ in range(n_tasks):
        subs = rng.choice(big_l, size=l, replace=False)
        slot_class = np.arange(m) % n_classes
        slot_sub = subs[np.arange(m) % l]
        positions = np.empty(m, dtype=np.int64)
        indices = np.empty(m, dtype=np.int64)
        for sub in subs:
            for c in range(n_classes):
                slots = np.flatnonzero((slot_sub == sub) & (slot_class == c))
                if slots.size == 0:
                    continue
                pool = pools[sub][c]
                if slots.size > pool.size:
                    raise DataError(
                        f"ensemble: subject {sources[sub].subject_id} has only "
                        f"{pool.size} train trials of class {c}, task needs "
                        f"{slots.size}")
                picked = rng.choice(pool, size=slots.size, replace=False)
                positions[slots] = sub
                indices[slots] = picked
        tasks.append(MetaTask(
            subject_pos=positions,
            trial_idx=indices,
            labels=slot_class.astype(np.int64),
            subject_ids=tuple(sources[s].subject_id for s in sorted(subs)),
        ))
    return tasks


def gather_task(task: MetaTask, sources: Sequence[SubjectDataset]
                ) -> Tuple[np.ndarray, np.ndarray]:
    """Materialize a task's trials (m, 1, C, T) and labels (m,)."""
    x = np.stack([
        sources[s].trials[i] for s, i in zip(task.subject_pos, task.trial_idx)
    ])
    return x, task.labels.copy()


def split_task(task: MetaTask, p: int, q: int, seed) -> EpisodeSplit:
    """Seeded shuffle of the task's m slots; first p -> T_b, rest -> T_m."""
    if p < 1 or q < 1:
        raise ConfigError(f"split: p={p} and q={q} must be positive")
    if p + q != task.m:
        raise ConfigError(f"split: p + q = {p + q} != task size m = {task.m}")
    perm = np.random.default_rng(seed).permutation(task.m)
    return EpisodeSplit(base_idx=perm[:p], meta_idx=perm[p:])


def sample_task_batch(ensemble: Sequence[MetaTask], k: int, seed,
                      cursor: int = 0) -> Tuple[List[MetaTask], int]:
    """Next ``k`` tasks from the seeded epoch permutation of the ensemble.

    Repeated calls with the returned cursor walk one epoch: every task
    appears exactly once, the final batch may be short.
    """
    n = len(ensemble)
    if n == 0:
        raise StateError("task batch: ensemble is empty")
    if k < 1 or k > n:
        raise ConfigError(f"task batch: need 1 <= k <= {n}, got {k}")
    if cursor < 0 or cursor >= n:
        raise UsageError(f"task batch: cursor {cursor} outside [0, {n})")
    perm = np.random.default_rng(seed).permutation(n)
    chosen = perm[cursor:cursor + k]
    return [ensemble[i] for i in chosen], min(cursor + k, n)

"""Two-stage episodic training with a base/meta learner pair.

Training runs in three phases:

1. ``pretrain`` fits the representation net (plus a throwaway head) on the
   pooled source-subject train data with step-decayed SGD.
2. ``meta_train`` builds the task ensemble and iterates episodes. Each
   episode clones the meta parameters into a base learner, updates only
   the prediction head on the base part of the task (n_base Adam steps,
   lr alpha), then takes the gradient of the meta-part loss at the updated
   base parameters and applies it to the meta parameters (Adam, lr beta,
   persistent optimizer state).
3. The adapted evaluation lives in ``eval_adapt``.

The base learner is re-cloned every episode, so base optimizer state is
fresh per episode while the meta optimizer accumulates across the whole
run. Batch-norm running statistics sit outside the gradient path: the
base loop updates (and then discards) the base clone's stats, and the
meta-part forward pass is bound to the meta learner's stat arrays so only
that pass advances them.

All randomness is drawn from streams derived as (root_seed, stream_tag,
counters...), which makes runs bitwise reproducible and lets a checkpoint
resume replay the exact stream sequence.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import seeding
from .checkpoint import load_arrays, save_arrays
from .episodes import (
    MetaTask,
    SubjectDataset,
    build_meta_ensemble,
    gather_task,
    sample_task_batch,
    split_task,
)
from .errors import ConfigError, DataError, NumericError
from .network import (ArchConfig, ParameterSet, forward, init_parameters,
                      predict_logits)
from .optim import AdamState, LrSchedule, adam_step, schedule_lr, sgd_step
from .tensor import Tensor, backward, softmax_cross_entropy


@dataclass(frozen=True)
class TrainingConfig:
    pretrain_lr: float = 0.01
    pretrain_epochs: int = 10
    pretrain_batch: int = 32
    alpha: float = 0.001          # base-learner Adam lr
    beta: float = 0.001           # meta-learner Adam lr
    n_base: int = 10              # base updates per episode
    k_tasks: int = 12             # tasks per sampled batch
    n_tasks: int = 100            # ensemble size M
    l_subjects: int = 0           # subjects per task; 0 -> min(3, L - 1)
    p: int = 10                   # base-part size
    q: int = 10                   # meta-part size
    meta_epochs: int = 20
    decay_factor: float = 0.2
    decay_interval: int = 5
    seed: int = 0

    def __post_init__(self):
        positives = ("pretrain_lr", "pretrain_epochs", "pretrain_batch", "alpha",
                     "beta", "n_base", "k_tasks", "n_tasks", "p", "q",
                     "meta_epochs", "decay_interval")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ConfigError(
                    f"training config: {name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(
                f"training config: decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.l_subjects < 0:
            raise ConfigError(
                f"training config: l_subjects must be >= 0, got {self.l_subjects}")
        if self.seed < 0:
            raise ConfigError(f"training config: seed must be >= 0, got {self.seed}")

    @property
    def m(self) -> int:
        """Task size; the episode split consumes the whole task."""
        return self.p + self.q


@dataclass
class MetaLearnerState:
    params: ParameterSet          # the meta learner {rep*, pred*}
    adam: AdamState               # persistent meta optimizer
    epoch: int                    # completed meta epochs
    episode: int                  # completed episodes over the whole run
    root_seed: int


@dataclass(frozen=True)
class EpisodeResult:
    base_losses: Tuple[float, ...]
    meta_loss: float
    start_synced: bool            # base == meta bitwise right after inheritance
    rep_frozen: bool              # rep weights bitwise constant across base loop


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    n_episodes: int
    base_loss: float
    meta_loss: float
    alpha: float
    beta: float
    start_synced: bool
    rep_frozen: bool


@dataclass
class PretrainResult:
    rep_arrays: Dict[str, np.ndarray]   # rep.* weights plus batch-norm stats
    epoch_losses: List[float]


@dataclass
class MetaTrainResult:
    state: MetaLearnerState
    epoch_logs: List[EpochLog]
    pretrain_losses: List[float]


def _pooled_train_data(sources: Sequence[SubjectDataset]) -> Tuple[np.ndarray, np.ndarray]:
    xs = [s.trials[s.train_idx] for s in sources]
    ys = [s.labels[s.train_idx] for s in sources]
    return np.concatenate(xs), np.concatenate(ys)


def _train_set_loss(params: "ParameterSet", x: np.ndarray,
                    y: np.ndarray) -> float:
    """Deterministic cross entropy over a whole set (no dropout, running
    stats); batch-order and dropout noise would otherwise mask slow progress."""
    logits = predict_logits(params, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float((log_norm - shifted[np.arange(y.size), y]).mean())


def pretrain(sources: Sequence[SubjectDataset], arch: ArchConfig,
             cfg: TrainingConfig) -> PretrainResult:
    """SGD warm start for the representation net on pooled source data.

    The prediction head trained here is discarded: only ``rep.*`` weights
    and batch-norm statistics are returned. ``epoch_losses[e]`` is the pooled
    train-set loss measured after epoch ``e`` finished.
    """
    if not sources:
        raise DataError("pretrain: no source subjects")
    params = init_parameters(arch, seed=[cfg.seed, seeding.PRETRAIN_INIT])
    x, y = _pooled_train_data(sources)
    n = x.shape[0]
    sched = LrSchedule(cfg.pretrain_lr, cfg.decay_factor, cfg.decay_interval)

    losses: List[float] = []
    for epoch in range(cfg.pretrain_epochs):
        lr = schedule_lr(sched, epoch)
        rng = seeding.derive(cfg.seed, seeding.PRETRAIN_EPOCH, epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.pretrain_batch):
            idx = order[start:start + cfg.pretrain_batch]
            params.zero_grad()
            logits = forward(params, Tensor(x[idx]), mode="train", rng=rng)
            loss = softmax_cross_entropy(logits, y[idx])
            grads = backward(loss, params.trainable())
            sgd_step(params, grads, lr)
        losses.append(_train_set_loss(params, x, y))

    rep = {name: t.data.copy() for name, t in params.items()
           if name.startswith("rep.")}
    rep.update({name: a.copy() for name, a in params.stats.items()})
    return PretrainResult(rep_arrays=rep, epoch_losses=losses)


def run_episode(state: MetaLearnerState, task: MetaTask,
                sources: Sequence[SubjectDataset], cfg: TrainingConfig,
                epoch: int, episode_in_epoch: int,
                alpha: float, beta: float) -> EpisodeResult:
    """One dual-learner episode; mutates ``state`` in place.

    Base phase: clone meta parameters, then n_base Adam steps on the
    prediction head only, against the base part of the task. Meta phase:
    gradient of the meta-part loss at the (updated) base parameters,
    applied to the meta parameters with the persistent Adam state.
    """
    index = state.episode
    try:
        base = state.params.clone()
        base_adam = AdamState()
        start_synced = all(
            (base[name].data == state.params[name].data).all()
            for name in base.tensors
        )

        split = split_task(task, cfg.p, cfg.q,
                           seed=[state.root_seed, seeding.EPISODE_SPLIT, epoch,
                                 episode_in_epoch])
        x, y = gather_task(task, sources)
        xb, yb = x[split.base_idx], y[split.base_idx]
        xm, ym = x[split.meta_idx], y[split.meta_idx]

        rep_before = {name: base[name].data.copy() for name in base.rep_names}

        base.mark_trainable(rep=False, pred=True)
        base_losses = []
        for i in range(cfg.n_base):
            rng = seeding.derive(state.root_seed, seeding.EPISODE_DROPOUT,
                                 epoch, episode_in_epoch, i)
            base.zero_grad()
            loss = softmax_cross_entropy(
                forward(base, Tensor(xb), mode="train", rng=rng), yb)
            grads = backward(loss, base.trainable())
            adam_step(base, grads, base_adam, lr=alpha)
            base_losses.append(loss.item())

        rep_frozen = all(
            (base[name].data == rep_before[name]).all() for name in base.rep_names
        )

        base.mark_trainable(rep=True, pred=True)
        base.zero_grad()
        bound = base.with_stats(state.params.stats)
        rng = seeding.derive(state.root_seed, seeding.EPISODE_DROPOUT,
                             epoch, episode_in_epoch, cfg.n_base)
        meta_loss = softmax_cross_entropy(
            forward(bound, Tensor(xm), mode="train", rng=rng), ym)
        meta_grads = backward(meta_loss, bound.trainable())

        adam_step(state.params, meta_grads, state.adam, lr=beta)
    except NumericError as e:
        raise NumericError(f"episode {index}: {e}") from None

    state.episode += 1
    return EpisodeResult(
        base_losses=tuple(base_losses),
        meta_loss=meta_loss.item(),
        start_synced=start_synced,
        rep_frozen=rep_frozen,
    )


def resolve_l(cfg: TrainingConfig, n_sources: int) -> int:
    return cfg.l_subjects if cfg.l_subjects else min(3, n_sources - 1)


def meta_train(sources: Sequence[SubjectDataset], arch: ArchConfig,
               cfg: TrainingConfig, checkpoint_dir: Optional[str] = None,
               resume_from: Optional[str] = None) -> MetaTrainResult:
    """Pretrain, then run the episodic meta loop over the task ensemble.

    With ``checkpoint_dir`` set, the full state is written after every
    epoch; passing one of those files as ``resume_from`` skips pretraining
    and continues the run bitwise-identically to an uninterrupted one.
    """
    if len(sources) < 2:
        raise DataError(f"meta-train: need at least 2 source subjects, got {len(sources)}")
    l = resolve_l(cfg, len(sources))
    ensemble = build_meta_ensemble(sources, cfg.n_tasks, cfg.m, l,
                                   seed=[cfg.seed, seeding.ENSEMBLE])
    if cfg.k_tasks > len(ensemble):
        raise ConfigError(
            f"meta-train: k_tasks={cfg.k_tasks} exceeds ensemble size {len(ensemble)}")

    pretrain_losses: List[float] = []
    if resume_from is not None:
        state = load_state(resume_from)
        if state.root_seed != cfg.seed:
            raise ConfigError(
                f"meta-train: checkpoint seed {state.root_seed} != config seed {cfg.seed}")
        if state.params.arch != arch:
            raise ConfigError(
                f"meta-train: checkpoint arch {state.params.arch} != requested {arch}")
    else:
        pre = pretrain(sources, arch, cfg)
        params = init_parameters(arch, seed=[cfg.seed, seeding.META_INIT])
        for name, arr in pre.rep_arrays.items():
            if name in params.tensors:
                params.tensors[name].data = arr.copy()
            else:
                params.stats[name][...] = arr
        state = MetaLearnerState(params=params, adam=AdamState(), epoch=0,
                                 episode=0, root_seed=cfg.seed)
        pretrain_losses = pre.epoch_losses

    alpha_sched = LrSchedule(cfg.alpha, cfg.decay_factor, cfg.decay_interval)
    beta_sched = LrSchedule(cfg.beta, cfg.decay_factor, cfg.decay_interval)

    epoch_logs: List[EpochLog] = []
    for epoch in range(state.epoch, cfg.meta_epochs):
        alpha = schedule_lr(alpha_sched, epoch)
        beta = schedule_lr(beta_sched, epoch)
        results: List[EpisodeResult] = []
        cursor = 0
        while cursor < len(ensemble):
            batch, cursor = sample_task_batch(
                ensemble, cfg.k_tasks,
                seed=[cfg.seed, seeding.EPOCH_ORDER, epoch], cursor=cursor)
            for task in batch:
                results.append(run_episode(state, task, sources, cfg, epoch,
                                           len(results), alpha, beta))
        state.epoch = epoch + 1
        epoch_logs.append(EpochLog(
            epoch=epoch,
            n_episodes=len(results),
            base_loss=float(np.mean([np.mean(r.base_losses) for r in results])),
            meta_loss=float(np.mean([r.meta_loss for r in results])),
            alpha=alpha,
            beta=beta,
            start_synced=all(r.start_synced for r in results),
            rep_frozen=all(r.rep_frozen for r in results),
        ))
        if checkpoint_dir is not None:
            save_state(state, os.path.join(
                checkpoint_dir, f"meta_epoch_{epoch + 1:03d}.ckpt"))

    return MetaTrainResult(state=state, epoch_logs=epoch_logs,
                           pretrain_losses=pretrain_losses)


def save_state(state: MetaLearnerState, path: str) -> None:
    arch = state.params.arch
    metadata = {
        "kind": "meta_state",
        "epoch": state.epoch,
        "episode": state.episode,
        "adam_t": state.adam.t,
        "root_seed": state.root_seed,
        "arch": {
            "channels": arch.channels, "samples": arch.samples,
            "n_classes": arch.n_classes, "f1": arch.f1, "d": arch.d,
            "f2": arch.f2, "k_t": arch.k_t, "k_s": arch.k_s,
            "hidden": arch.hidden, "dropout": arch.dropout,
        },
    }
    arrays = dict(state.params.named_arrays())
    arrays.update(state.adam.named_arrays())
    save_arrays(path, metadata, arrays)


def load_state(path: str) -> MetaLearnerState:
    metadata, arrays = load_arrays(path)
    if metadata.get("kind") != "meta_state":
        raise ConfigError(f"{path}: not a meta-learner checkpoint")
    arch = ArchConfig(**metadata["arch"])
    param_arrays = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    params = ParameterSet.from_arrays(arch, param_arrays)
    adam = AdamState.from_arrays(arrays, t=int(metadata["adam_t"]))
    return MetaLearnerState(
        params=params,
        adam=adam,
        epoch=int(metadata["epoch"]),
        episode=int(metadata["episode"]),
        root_seed=int(metadata["root_seed"]),
    )

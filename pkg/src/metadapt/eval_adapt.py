"""Target-subject adaptation, classification metrics, retention evaluation,
and the target-data-budget sweep.

Adaptation clones the meta parameters and fine-tunes on a small stratified
draw from the target subject's train split. Retention asks how much source
performance the adapted model kept. The sweep repeats adaptation across
budgets and seeds and aggregates the resulting metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import seeding
from .episodes import SubjectDataset
from .errors import ConfigError, DataError, InputError, MetricError
from .meta_trainer import MetaLearnerState
from .network import ArchConfig, ParameterSet, forward, init_parameters, predict_logits
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, softmax, softmax_cross_entropy


@dataclass(frozen=True)
class AdaptConfig:
    budget: int = 30            # target trials available for adaptation
    epochs: int = 20
    lr: float = 0.001
    batch_size: int = 10
    freeze_rep: bool = False    # tune the prediction head only
    seed: int = 0

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError(f"adapt: budget must be >= 1, got {self.budget}")
        if self.epochs < 0:
            raise ConfigError(f"adapt: epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"adapt: lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"adapt: batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError(f"adapt: seed must be >= 0, got {self.seed}")


def trials_from_seconds(seconds: float, trial_seconds: float) -> int:
    """Convert a recording-time budget to a trial count."""
    if seconds <= 0 or trial_seconds <= 0:
        raise InputError("budget conversion needs positive durations")
    return max(1, int(round(seconds / trial_seconds)))


def draw_budget(target: SubjectDataset, budget: int,
                rng: np.random.Generator) -> np.ndarray:
    """Stratified draw of ``budget`` trial indices from the target train split."""
    if budget < target.n_classes:
        raise DataError(
            f"budget {budget} below one trial per class ({target.n_classes})")
    pools = target.train_indices_by_class()
    counts = np.full(target.n_classes, budget // target.n_classes, dtype=np.int64)
    counts[: budget % target.n_classes] += 1
    picked = []
    for c in range(target.n_classes):
        pool = pools[c]
        if counts[c] > pool.size:
            raise DataError(
                f"subject {target.subject_id}: class {c} has {pool.size} train "
                f"trials, budget needs {counts[c]}")
        picked.append(rng.choice(pool, size=counts[c], replace=False))
    return np.sort(np.concatenate(picked))


def _fit(params: ParameterSet, x: np.ndarray, y: np.ndarray,
         epochs: int, lr: float, batch_size: int, seed: int,
         stream_tag: int) -> None:
    """Adam fine-tuning of whatever ``params`` marks trainable, in place."""
    adam = AdamState()
    n = x.shape[0]
    for epoch in range(epochs):
        rng = seeding.derive(seed, stream_tag, epoch)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            params.zero_grad()
            loss = softmax_cross_entropy(
                forward(params, Tensor(x[idx]), mode="train", rng=rng), y[idx])
            grads = backward(loss, params.trainable())
            adam_step(params, grads, adam, lr=lr)


def adapt(meta: MetaLearnerState, target: SubjectDataset,
          cfg: AdaptConfig) -> ParameterSet:
    """Fine-tune a clone of the meta parameters on the target budget.

    The meta state is never touched; with ``epochs=0`` the returned clone
    is bitwise identical to the meta parameters. Running normalization
    statistics stay at their meta-learned values: a handful of target
    batches makes a poor population estimate, and source retention
    depends on the original statistics.
    """
    params = meta.params.clone()
    idx = draw_budget(target, cfg.budget,
                      seeding.derive(cfg.seed, seeding.ADAPT_DRAW))
    if cfg.epochs == 0:
        return params
    params.mark_trainable(rep=not cfg.freeze_rep, pred=True)
    _fit(params, target.trials[idx], target.labels[idx], cfg.epochs, cfg.lr,
         cfg.batch_size, cfg.seed, seeding.ADAPT_EPOCH)
    params.mark_trainable(rep=True, pred=True)
    for name, arr in params.stats.items():
        arr[...] = meta.params.stats[name]
    return params


def fit_from_scratch(arch: ArchConfig, target: SubjectDataset, cfg: AdaptConfig,
                     epochs: Optional[int] = None) -> ParameterSet:
    """Baseline: random init trained on the same budget draw as ``adapt``.

    Gets five times the adaptation epochs by default so the comparison
    is against a properly converged from-scratch model.
    """
    params = init_parameters(arch, seed=[cfg.seed, seeding.SCRATCH_INIT])
    idx = draw_budget(target, cfg.budget,
                      seeding.derive(cfg.seed, seeding.ADAPT_DRAW))
    n_epochs = 5 * cfg.epochs if epochs is None else epochs
    _fit(params, target.trials[idx], target.labels[idx], n_epochs, cfg.lr,
         cfg.batch_size, cfg.seed, seeding.ADAPT_EPOCH)
    return params


# ---------------------------------------------------------------------------
# metrics

def accuracy(predicted: np.ndarray, true: np.ndarray) -> float:
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.size == 0 or true.size == 0:
        raise InputError("accuracy: empty inputs")
    if predicted.shape != true.shape:
        raise InputError(
            f"accuracy: {predicted.shape} predictions vs {true.shape} labels")
    return float((predicted == true).mean())


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sv = values[order]
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc_macro(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro one-vs-rest AUC; tied scores count half per pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise InputError(
            f"auc: scores {scores.shape} do not match {labels.shape[0]} labels")
    n_classes = scores.shape[1]
    aucs = []
    for c in range(n_classes):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = labels.size - n_pos
        if n_pos == 0:
            raise MetricError(f"auc: class {c} absent from labels")
        if n_neg == 0:
            raise MetricError(f"auc: class {c} is the only class present")
        ranks = _midranks(scores[:, c])
        rank_sum = ranks[pos].sum()
        aucs.append((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    return float(np.mean(aucs))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation (midranks for ties); 0.0 when either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise InputError("spearman: need two equal-length sequences of >= 2 values")
    rx = _midranks(x)
    ry = _midranks(y)
    sx = rx.std()
    sy = ry.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class RetentionReport:
    subject_ids: Tuple[str, ...]
    accuracies: Tuple[float, ...]
    aucs: Tuple[float, ...]
    avg_acc: float
    avg_ra: float


@dataclass(frozen=True)
class EvalReport:
    target_accuracy: float
    target_auc: float
    retention: RetentionReport


def evaluate_split(params: ParameterSet, ds: SubjectDataset) -> Tuple[float, float]:
    """(accuracy, macro AUC) on a subject's eval split."""
    if ds.eval_idx.size == 0:
        raise DataError(f"subject {ds.subject_id}: empty eval split")
    logits = predict_logits(params, ds.trials[ds.eval_idx])
    probs = softmax(logits)
    true = ds.labels[ds.eval_idx]
    return accuracy(probs.argmax(axis=1), true), roc_auc_macro(probs, true)


def retention_eval(adapted: ParameterSet,
                   sources: Sequence[SubjectDataset]) -> RetentionReport:
    """Per-source eval metrics and their means (Avg. Acc / Avg. RA)."""
    if not sources:
        raise DataError("retention: no source subjects")
    ids, accs, aucs = [], [], []
    for ds in sources:
        acc, auc = evaluate_split(adapted, ds)
        ids.append(ds.subject_id)
        accs.append(acc)
        aucs.append(auc)
    return RetentionReport(
        subject_ids=tuple(ids),
        accuracies=tuple(accs),
        aucs=tuple(aucs),
        avg_acc=float(np.mean(accs)),
        avg_ra=float(np.mean(aucs)),
    )


def evaluate(params: ParameterSet, target: SubjectDataset,
             sources: Sequence[SubjectDataset]) -> EvalReport:
    acc, auc = evaluate_split(params, target)
    return EvalReport(target_accuracy=acc, target_auc=auc,
                      retention=retention_eval(params, sources))


# ---------------------------------------------------------------------------
# budget sweep

@dataclass(frozen=True)
class SweepCell:
    budget: int
    seed: int
    target_accuracy: float
    target_auc: float
    avg_acc: float
    avg_ra: float


@dataclass(frozen=True)
class SweepRow:
    budget: int
    n_seeds: int
    mean_target_accuracy: float
    std_target_accuracy: float
    mean_target_auc: float
    std_target_auc: float
    mean_avg_acc: float
    mean_avg_ra: float


@dataclass(frozen=True)
class SweepTable:
    cells: Tuple[SweepCell, ...]
    rows: Tuple[SweepRow, ...]


def budget_sweep(meta: MetaLearnerState, target: SubjectDataset,
                 sources: Sequence[SubjectDataset], budgets: Sequence[int],
                 seeds: Sequence[int], cfg: AdaptConfig) -> SweepTable:
    """Adapt and evaluate per (budget, seed); aggregate per budget."""
    budgets = list(budgets)
    if not budgets:
        raise ConfigError("sweep: empty budget list")
    if budgets != sorted(budgets):
        raise ConfigError(f"sweep: budgets must be ascending, got {budgets}")
    if not seeds:
        raise ConfigError("sweep: empty seed list")

    cells: List[SweepCell] = []
    rows: List[SweepRow] = []
    for budget in budgets:
        accs, aucs, ret_accs, ret_aucs = [], [], [], []
        for seed in seeds:
            adapted = adapt(meta, target, replace(cfg, budget=budget, seed=seed))
            report = evaluate(adapted, target, sources)
            cells.append(SweepCell(
                budget=budget, seed=seed,
                target_accuracy=report.target_accuracy,
                target_auc=report.target_auc,
                avg_acc=report.retention.avg_acc,
                avg_ra=report.retention.avg_ra,
            ))
            accs.append(report.target_accuracy)
            aucs.append(report.target_auc)
            ret_accs.append(report.retention.avg_acc)
            ret_aucs.append(report.retention.avg_ra)
        rows.append(SweepRow(
            budget=budget, n_seeds=len(seeds),
            mean_target_accuracy=float(np.mean(accs)),
            std_target_accuracy=float(np.std(accs)),
            mean_target_auc=float(np.mean(aucs)),
            std_target_auc=float(np.std(aucs)),
            mean_avg_acc=float(np.mean(ret_accs)),
            mean_avg_ra=float(np.mean(ret_aucs)),
        ))
    return SweepTable(cells=tuple(cells), rows=tuple(rows))

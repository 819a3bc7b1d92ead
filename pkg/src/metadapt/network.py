"""Representation network (rep, parameters named ``rep.*``) and prediction
head (``pred.*``), in the EEGNet family.

The representation net maps a trial batch (b, 1, C, T) through three conv
blocks to a flat feature vector of size f2 * T / 32; the prediction head is
two fully connected layers ending in logits. Batch-norm running statistics
live beside the weights in the ParameterSet and travel with it through
clone/checkpoint, but are not trainable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DimensionError, UsageError
from .tensor import BatchNormStats, Tensor


@dataclass(frozen=True)
class ArchConfig:
    channels: int = 8
    samples: int = 256
    n_classes: int = 4
    f1: int = 8            # temporal filters
    d: int = 2             # depth multiplier of the spatial conv
    f2: int = 16           # separable-conv output filters
    k_t: int = 32          # temporal kernel width
    k_s: int = 16          # separable kernel width
    hidden: int = 64
    dropout: float = 0.25

    def __post_init__(self):
        for name in ("channels", "samples", "n_classes", "f1", "d", "f2",
                     "k_t", "k_s", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"arch: {name} must be positive, got {getattr(self, name)}")
        if self.samples % 32 != 0:
            raise ConfigError(f"arch: samples must be divisible by 32, got {self.samples}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"arch: dropout must be in [0, 1), got {self.dropout}")
        if self.k_s > self.samples // 4:
            raise ConfigError(
                f"arch: k_s={self.k_s} exceeds pooled width {self.samples // 4}")

    @property
    def feature_dim(self) -> int:
        return self.f2 * (self.samples // 32)


class ParameterSet:
    """Named trainable tensors plus batch-norm running statistics.

    Names starting with ``rep.`` form the representation parameters, names
    starting with ``pred.`` the prediction parameters. ``stats`` maps
    ``rep.bn*.{mean,var,count}`` to plain arrays mutated in place by
    train-mode forward passes.
    """

    def __init__(self, arch: ArchConfig, tensors: Dict[str, Tensor],
                 stats: Dict[str, np.ndarray]):
        self.arch = arch
        self.tensors = tensors
        self.stats = stats

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def rep_names(self) -> Tuple[str, ...]:
        return tuple(n for n in sorted(self.tensors) if n.startswith("rep."))

    @property
    def pred_names(self) -> Tuple[str, ...]:
        return tuple(n for n in sorted(self.tensors) if n.startswith("pred."))

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(sorted(self.tensors.items()))

    def trainable(self) -> Dict[str, Tensor]:
        return {n: t for n, t in sorted(self.tensors.items()) if t.requires_grad}

    def mark_trainable(self, rep: bool, pred: bool) -> None:
        for name, t in self.tensors.items():
            t.requires_grad = rep if name.startswith("rep.") else pred

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def bn_stats(self, block: str) -> BatchNormStats:
        return BatchNormStats(
            mean=self.stats[f"{block}.mean"],
            var=self.stats[f"{block}.var"],
            count=self.stats[f"{block}.count"],
        )

    def clone(self) -> "ParameterSet":
        tensors = {
            n: Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.data.dtype)
            for n, t in self.tensors.items()
        }
        stats = {n: a.copy() for n, a in self.stats.items()}
        return ParameterSet(self.arch, tensors, stats)

    def with_stats(self, stats: Dict[str, np.ndarray]) -> "ParameterSet":
        """Same weight tensors, someone else's running-statistic arrays."""
        return ParameterSet(self.arch, self.tensors, stats)

    def load_values(self, other: "ParameterSet") -> None:
        """Copy weight values and stats from ``other`` into this set."""
        for name, t in self.tensors.items():
            t.data = other.tensors[name].data.copy()
            t.grad = None
        for name, a in self.stats.items():
            a[...] = other.stats[name]

    def named_arrays(self) -> Dict[str, np.ndarray]:
        out = {n: t.data for n, t in sorted(self.tensors.items())}
        out.update(sorted(self.stats.items()))
        return out

    @classmethod
    def from_arrays(cls, arch: ArchConfig, arrays: Dict[str, np.ndarray]) -> "ParameterSet":
        template = init_parameters(arch, seed=0)
        tensors: Dict[str, Tensor] = {}
        for name, t in template.tensors.items():
            if name not in arrays:
                raise UsageError(f"parameter set: missing array {name!r}")
            arr = np.asarray(arrays[name])
            if arr.shape != t.data.shape:
                raise DimensionError(
                    f"parameter set: {name} has shape {arr.shape}, expected {t.data.shape}")
            tensors[name] = Tensor(arr.copy(), requires_grad=True, dtype=t.data.dtype)
        stats: Dict[str, np.ndarray] = {}
        for name, a in template.stats.items():
            if name not in arrays:
                raise UsageError(f"parameter set: missing array {name!r}")
            arr = np.asarray(arrays[name]).astype(a.dtype)
            if arr.shape != a.shape:
                raise DimensionError(
                    f"parameter set: {name} has shape {arr.shape}, expected {a.shape}")
            stats[name] = arr.copy()
        return cls(arch, tensors, stats)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(tc.default_dtype())


def init_parameters(arch: ArchConfig, seed) -> ParameterSet:
    """Fan-in-scaled uniform weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    dt = tc.default_dtype()
    f1, d, f2 = arch.f1, arch.d, arch.f2

    def t(arr):
        return Tensor(arr, requires_grad=True, dtype=dt)

    tensors = {
        "rep.conv1.k": t(_uniform(rng, (f1, 1, 1, arch.k_t), arch.k_t)),
        "rep.bn1.gamma": t(np.ones(f1, dtype=dt)),
        "rep.bn1.beta": t(np.zeros(f1, dtype=dt)),
        "rep.conv2.k": t(_uniform(rng, (f1 * d, 1, arch.channels, 1), arch.channels)),
        "rep.bn2.gamma": t(np.ones(f1 * d, dtype=dt)),
        "rep.bn2.beta": t(np.zeros(f1 * d, dtype=dt)),
        "rep.conv3.depth.k": t(_uniform(rng, (f1 * d, 1, 1, arch.k_s), arch.k_s)),
        "rep.conv3.point.k": t(_uniform(rng, (f2, f1 * d, 1, 1), f1 * d)),
        "rep.bn3.gamma": t(np.ones(f2, dtype=dt)),
        "rep.bn3.beta": t(np.zeros(f2, dtype=dt)),
        "pred.fc1.w": t(_uniform(rng, (arch.hidden, arch.feature_dim), arch.feature_dim)),
        "pred.fc1.b": t(np.zeros(arch.hidden, dtype=dt)),
        "pred.fc2.w": t(_uniform(rng, (arch.n_classes, arch.hidden), arch.hidden)),
        "pred.fc2.b": t(np.zeros(arch.n_classes, dtype=dt)),
    }
    stats: Dict[str, np.ndarray] = {}
    for block, width in (("rep.bn1", f1), ("rep.bn2", f1 * d), ("rep.bn3", f2)):
        stats[f"{block}.mean"] = np.zeros(width, dtype=np.float64)
        stats[f"{block}.var"] = np.ones(width, dtype=np.float64)
        stats[f"{block}.count"] = np.zeros((), dtype=np.int64)
    return ParameterSet(arch, tensors, stats)


def rep_forward(params: ParameterSet, batch: Tensor, mode: str,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Trial batch (b, 1, C, T) -> features (b, f2 * T / 32)."""
    arch = params.arch
    expected = (1, arch.channels, arch.samples)
    if batch.data.ndim != 4 or batch.shape[1:] != expected:
        raise DimensionError(
            f"rep_forward: batch shape {batch.shape} != (b, {expected[0]}, "
            f"{expected[1]}, {expected[2]})")
    if mode not in ("train", "eval"):
        raise UsageError(f"rep_forward: mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and arch.dropout > 0.0 and rng is None:
        raise UsageError("rep_forward: train mode with dropout needs an rng")

    t = tc.conv2d(batch, params["rep.conv1.k"], padding="same")
    t = tc.batch_norm(t, params["rep.bn1.gamma"], params["rep.bn1.beta"],
                      params.bn_stats("rep.bn1"), mode)

    t = tc.conv2d(t, params["rep.conv2.k"], groups=arch.f1, padding="valid")
    t = tc.batch_norm(t, params["rep.bn2.gamma"], params["rep.bn2.beta"],
                      params.bn_stats("rep.bn2"), mode)
    t = tc.elu(t)
    t = tc.avg_pool_w(t, 4)
    if train and arch.dropout > 0.0:
        t = tc.dropout(t, arch.dropout, rng)

    t = tc.conv2d(t, params["rep.conv3.depth.k"], groups=arch.f1 * arch.d,
                  padding="same")
    t = tc.conv2d(t, params["rep.conv3.point.k"], padding="valid")
    t = tc.batch_norm(t, params["rep.bn3.gamma"], params["rep.bn3.beta"],
                      params.bn_stats("rep.bn3"), mode)
    t = tc.elu(t)
    t = tc.avg_pool_w(t, 8)
    if train and arch.dropout > 0.0:
        t = tc.dropout(t, arch.dropout, rng)

    return tc.flatten_batch(t)


def pred_forward(params: ParameterSet, features: Tensor) -> Tensor:
    """Features -> logits via linear(hidden), ELU, linear(n_classes)."""
    if features.data.ndim != 2 or features.shape[1] != params.arch.feature_dim:
        raise DimensionError(
            f"pred_forward: features shape {features.shape} != "
            f"(b, {params.arch.feature_dim})")
    h = tc.elu(tc.linear(features, params["pred.fc1.w"], params["pred.fc1.b"]))
    return tc.linear(h, params["pred.fc2.w"], params["pred.fc2.b"])


def forward(params: ParameterSet, batch: Tensor, mode: str,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    return pred_forward(params, rep_forward(params, batch, mode, rng))


def predict_logits(params: ParameterSet, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for trials (n, 1, C, T), batched, no graph kept."""
    out = []
    for start in range(0, x.shape[0], batch_size):
        batch = Tensor(x[start:start + batch_size])
        out.append(forward(params, batch, mode="eval").data)
    return np.concatenate(out, axis=0)

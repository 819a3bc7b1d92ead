"""Dense tensors, forward kernels, and reverse-mode differentiation.

Every op records its inputs and a backward closure on the output tensor,
so a forward pass builds an implicit acyclic graph. ``Tensor.backward``
walks that graph in reverse topological order and accumulates gradients
into ``.grad`` of every tensor that was marked ``requires_grad``.

Kernels check their outputs for NaN/Inf and raise ``NumericError`` so a
diverging run fails at the op that produced the bad value, not epochs
later. Default precision is float64 (needed for meaningful gradient
checks); ``set_default_dtype(np.float32)`` switches to 32-bit.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, NumericError, StateError, UsageError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise UsageError(f"default dtype must be float64 or float32, got {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Value node of the computation graph.

    ``data`` is a contiguous ndarray; once a tensor is produced it is
    treated as immutable. Leaf tensors created with ``requires_grad=True``
    collect gradients during ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: str = "leaf", _parents: tuple = ()):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        _ensure_finite(arr, op)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # Small operator surface; the network itself uses the named kernels below.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def backward(self) -> None:
        """Reverse-mode pass seeded with d(self)/d(self) = 1.

        Only valid on scalar tensors (the loss). Gradients accumulate into
        ``.grad`` of every reachable tensor with ``requires_grad``.
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _toposort(root: Tensor) -> list:
    """Iterative post-order over the subgraph that requires gradients."""
    order: list = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g.dtype != t.data.dtype else g
        if t.grad.shape != t.data.shape:
            t.grad = t.grad.reshape(t.data.shape)
    else:
        t.grad = t.grad + g.reshape(t.data.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor],
            backward: Optional[Callable[[Tensor], None]]) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, dtype=data.dtype, op=op,
                 _parents=tuple(parents) if requires else ())
    if requires and backward is not None:
        out._backward = lambda: backward(out)
    return out


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad, b.data.shape))

    return _result(data, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _result(data, "mul", (a, b), backward)


def power(a: Tensor, exponent) -> Tensor:
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, out.grad * exponent * a.data ** (exponent - 1.0))

    return _result(data, "power", (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(out.grad, a.data.shape))

    return _result(data, "sum", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, out.grad.reshape(a.data.shape))

    return _result(data, "reshape", (a,), backward)


def flatten_batch(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------------------
# network kernels

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y[i, j] = sum_k w[j, k] * x[i, k] + b[j]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"linear: x shape {x.shape} incompatible with weight shape {w.shape}")
    if b.data.shape != (w.shape[0],):
        raise DimensionError(
            f"linear: bias shape {b.shape} incompatible with weight shape {w.shape}")
    data = x.data @ w.data.T + b.data

    def backward(out: Tensor) -> None:
        g = out.grad
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        if w.requires_grad:
            _accumulate(w, g.T @ x.data)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _result(data, "linear", (x, w, b), backward)


def _conv_geometry(x_shape, k_shape, groups: int, padding: str):
    batch, cin, h, w = x_shape
    cout, cing, kh, kw = k_shape
    if groups < 1 or cin % groups != 0 or cout % groups != 0:
        raise DimensionError(
            f"conv2d: cin={cin}, cout={cout} not divisible by groups={groups}")
    if cing != cin // groups:
        raise DimensionError(
            f"conv2d: kernel expects {cing} channels/group, input has {cin // groups}")
    if padding == "valid":
        pl = pr = 0
    elif padding == "same":
        pl = (kw - 1) // 2
        pr = kw - 1 - pl
    else:
        raise InputError(f"conv2d: unknown padding mode {padding!r}")
    ho = h - kh + 1
    wo = w + pl + pr - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: kernel {(kh, kw)} larger than padded input {(h, w + pl + pr)}")
    return pl, pr, ho, wo


def conv2d(x: Tensor, k: Tensor, groups: int = 1, padding: str = "valid") -> Tensor:
    """Grouped 2-d cross-correlation, stride 1.

    ``padding="same"`` pads the width (time) axis so it is preserved;
    the height (channel) axis always uses valid padding.
    """
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(
            f"conv2d: need 4-d input and kernel, got {x.shape} and {k.shape}")
    batch, cin, h, w = x.data.shape
    cout, cing, kh, kw = k.data.shape
    pl, pr, ho, wo = _conv_geometry(x.data.shape, k.data.shape, groups, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 0), (pl, pr))) if (pl or pr) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win_g = win.reshape(batch, groups, cing, ho, wo, kh, kw)
    k_g = k.data.reshape(groups, cout // groups, cing, kh, kw)
    data = np.einsum("bgchwuv,gocuv->bgohw", win_g, k_g, optimize=True)
    data = np.ascontiguousarray(data.reshape(batch, cout, ho, wo))

    def backward(out: Tensor) -> None:
        gy = out.grad.reshape(batch, groups, cout // groups, ho, wo)
        if k.requires_grad:
            gk = np.einsum("bgchwuv,bgohw->gocuv", win_g, gy, optimize=True)
            _accumulate(k, gk.reshape(k.data.shape))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    # contribution of output cell (i, j) to input cell (i+u, j+v)
                    t = np.einsum("goc,bgohw->bgchw", k_g[:, :, :, u, v], gy,
                                  optimize=True)
                    gxp[:, :, u:u + ho, v:v + wo] += t.reshape(batch, cin, ho, wo)
            gx = gxp[:, :, :, pl:pl + w] if (pl or pr) else gxp
            _accumulate(x, gx)

    return _result(data, "conv2d", (x, k), backward)


def elu(x: Tensor) -> Tensor:
    """x for x >= 0, exp(x) - 1 otherwise."""
    neg = x.data < 0
    data = x.data.copy()
    data[neg] = np.expm1(x.data[neg])

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            slope = np.ones_like(data)
            slope[neg] = data[neg] + 1.0  # exp(x) for the negative branch
            _accumulate(x, out.grad * slope)

    return _result(data, "elu", (x,), backward)


def avg_pool_w(x: Tensor, pool_width: int) -> Tensor:
    """Non-overlapping means along the trailing (time) axis."""
    if pool_width < 1:
        raise InputError(f"avg_pool_w: pool_width must be >= 1, got {pool_width}")
    w = x.data.shape[-1]
    if w % pool_width != 0:
        raise DimensionError(
            f"avg_pool_w: width {w} not divisible by pool_width {pool_width}")
    lead = x.data.shape[:-1]
    data = x.data.reshape(*lead, w // pool_width, pool_width).mean(axis=-1)

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            g = np.repeat(out.grad / pool_width, pool_width, axis=-1)
            _accumulate(x, g)

    return _result(data, "avg_pool_w", (x,), backward)


class BatchNormStats:
    """Running statistics bound to one batch-norm call site.

    Thin view over arrays owned by a parameter set; train-mode forward
    mutates them in place, which is how stat updates reach the owner.
    """

    __slots__ = ("mean", "var", "count")

    def __init__(self, mean: np.ndarray, var: np.ndarray, count: np.ndarray):
        self.mean = mean
        self.var = var
        self.count = count


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
               mode: str, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization with affine transform.

    Train mode normalizes by the current batch's (biased) statistics and
    folds them into the running stats; eval mode normalizes by the running
    stats and raises ``StateError`` if none were ever recorded.
    """
    if x.data.ndim not in (2, 4):
        raise DimensionError(f"batch_norm: need 2-d or 4-d input, got {x.shape}")
    channels = x.data.shape[1]
    if gamma.data.shape != (channels,) or beta.data.shape != (channels,):
        raise DimensionError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match {channels} channels")
    if mode not in ("train", "eval"):
        raise UsageError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")

    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    cshape = (1, channels) if x.data.ndim == 2 else (1, channels, 1, 1)
    n = x.data.size // channels

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean[...] = (1.0 - momentum) * stats.mean + momentum * mu
        stats.var[...] = (1.0 - momentum) * stats.var + momentum * var
        stats.count[...] = stats.count + 1
    else:
        if int(stats.count) == 0:
            raise StateError("batch_norm: eval mode before any running stats recorded")
        mu = stats.mean.astype(x.data.dtype)
        var = stats.var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(cshape)) * inv_std.reshape(cshape)
    data = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)

    def backward(out: Tensor) -> None:
        gy = out.grad
        if gamma.requires_grad:
            _accumulate(gamma, (gy * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, gy.sum(axis=axes))
        if x.requires_grad:
            gxhat = gy * gamma.data.reshape(cshape)
            if mode == "eval":
                _accumulate(x, gxhat * inv_std.reshape(cshape))
            else:
                centered = x.data - mu.reshape(cshape)
                dvar = (gxhat * centered).sum(axis=axes) * (-0.5) * inv_std ** 3
                dmu = (-(gxhat.sum(axis=axes)) * inv_std
                       - 2.0 * dvar * centered.mean(axis=axes).reshape(-1))
                gx = (gxhat * inv_std.reshape(cshape)
                      + dvar.reshape(cshape) * 2.0 * centered / n
                      + dmu.reshape(cshape) / n)
                _accumulate(x, gx)

    return _result(data, "batch_norm", (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call sites skip it entirely in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    data = x.data * keep * scale

    def backward(out: Tensor) -> None:
        if x.requires_grad:
            _accumulate(x, out.grad * keep * scale)

    return _result(data, "dropout", (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: need 2-d logits, got {logits.shape}")
    batch, classes = logits.data.shape
    if labels.shape != (batch,):
        raise DimensionError(
            f"softmax_cross_entropy: labels shape {labels.shape} != ({batch},)")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(
            f"softmax_cross_entropy: labels must lie in [0, {classes}), "
            f"got range [{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    data = np.asarray(-log_probs[np.arange(batch), labels].mean(),
                      dtype=logits.data.dtype)

    def backward(out: Tensor) -> None:
        if logits.requires_grad:
            probs = exp / denom
            probs[np.arange(batch), labels] -= 1.0
            _accumulate(logits, out.grad * probs / batch)

    return _result(data, "softmax_cross_entropy", (logits,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain-array softmax used for reporting scores (no graph)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# gradient interface

GradientMap = Dict[str, np.ndarray]


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> GradientMap:
    """Run the reverse pass and collect gradients for named parameters.

    Keys are exactly the entries of ``params`` marked ``requires_grad``;
    parameters disconnected from the loss report zero gradients.
    """
    loss.backward()
    grads: GradientMap = {}
    for name, t in params.items():
        if not t.requires_grad:
            continue
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads


def grad_check(model_fn: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray],
               epsilon: float = 1e-5,
               deterministic: bool = True,
               max_coords: int = 64,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``model_fn`` must be a pure function of its parameter tensors (dropout
    off, batch norm on eval stats); pass ``deterministic=False`` to state
    the contrary and get a ``UsageError``. Parameters larger than
    ``max_coords`` are probed on a seeded coordinate sample. The relative
    error uses a unit floor in the denominator so finite-difference noise
    around zero gradients is measured absolutely.
    """
    if epsilon <= 0:
        raise InputError(f"grad_check: epsilon must be positive, got {epsilon}")
    if not deterministic:
        raise UsageError("grad_check: requires deterministic mode "
                         "(dropout off, batch norm on eval stats)")

    tensors = {name: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
               for name, v in params.items()}
    loss = model_fn(tensors)
    analytic = backward(loss, tensors)

    values = {name: np.asarray(v, dtype=np.float64).copy() for name, v in params.items()}

    def eval_loss() -> float:
        frozen = {name: Tensor(v) for name, v in values.items()}
        return model_fn(frozen).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(values):
        flat = values[name].reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else np.sort(rng.choice(n, size=max_coords, replace=False)))
        a_flat = analytic[name].reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = eval_loss()
            flat[idx] = orig - epsilon
            down = eval_loss()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(a_flat[idx]), abs(numeric), 1.0)
            worst = max(worst, abs(a_flat[idx] - numeric) / denom)
    return worst

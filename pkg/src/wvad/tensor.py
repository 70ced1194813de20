"""Minimal reverse-mode autodiff over dense numpy arrays.

Define-by-run: every operation records its inputs and a local backward rule on
the result, and ``Tensor.backward()`` replays the recorded graph in reverse
topological order. float64 is the verification dtype (all gradient checks run
in it); float32 is allowed for training. Binary ops wrap plain numbers as
constants in the other operand's dtype so the dtype never silently promotes.

Single-threaded numpy is the correctness baseline: forward results are
bitwise deterministic for fixed inputs and a fixed BLAS thread count.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError

# Set True in tests to assert every op output is finite.
CHECK_FINITE = False

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense array plus an optional gradient and backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be a scalar. Nodes are visited in exact reverse
        topological order; each parent receives one accumulated gradient.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = self._wrap(other)
        out = _result(self.data + other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    _accum(self, _unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    _accum(other, _unbroadcast(g, other.data.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        out = _result(self.data - other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    _accum(self, _unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    _accum(other, _unbroadcast(-g, other.data.shape))
            out._backward = backward
        return out

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        other = self._wrap(other)
        out = _result(self.data * other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    _accum(self, _unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    _accum(other, _unbroadcast(g * self.data, other.data.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        out = _result(self.data / other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    _accum(self, _unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    _accum(other, _unbroadcast(-g * self.data / (other.data * other.data),
                                               other.data.shape))
            out._backward = backward
        return out

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __neg__(self):
        out = _result(-self.data, (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, -g)
            out._backward = backward
        return out

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            raise TypeError("matmul expects a Tensor operand")
        a, b = self.data, other.data
        if a.ndim > 2 or b.ndim > 2 or a.ndim == 0 or b.ndim == 0:
            raise ValueError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
        out = _result(a @ b, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    if a.ndim == 2 and b.ndim == 2:
                        _accum(self, g @ b.T)
                    elif a.ndim == 2:          # (n,k) @ (k,) -> (n,)
                        _accum(self, np.outer(g, b))
                    elif b.ndim == 2:          # (k,) @ (k,m) -> (m,)
                        _accum(self, b @ g)
                    else:                      # (k,) @ (k,) -> scalar
                        _accum(self, g * b)
                if other.requires_grad:
                    if a.ndim == 2 and b.ndim == 2:
                        _accum(other, a.T @ g)
                    elif a.ndim == 2:
                        _accum(other, a.T @ g)
                    elif b.ndim == 2:
                        _accum(other, np.outer(a, g))
                    else:
                        _accum(other, g * a)
            out._backward = backward
        return out

    # -- shape ops -----------------------------------------------------

    def __getitem__(self, idx):
        out = _result(self.data[idx], (self,))
        if out.requires_grad:
            def backward(g):
                z = np.zeros_like(self.data)
                if _basic_index(idx):
                    z[idx] += g
                else:
                    np.add.at(z, idx, g)
                _accum(self, z)
            out._backward = backward
        return out

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _result(self.data.reshape(shape), (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, g.reshape(self.data.shape))
            out._backward = backward
        return out

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ValueError("transpose expects a 2-D tensor")
        out = _result(self.data.T, (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, g.T)
            out._backward = backward
        return out

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _result(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, _spread(g, self.data.shape, axis, keepdims))
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else _axis_count(self.data.shape, axis)
        out = _result(self.data.mean(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, _spread(g, self.data.shape, axis, keepdims) / count)
            out._backward = backward
        return out

    # -- elementwise ---------------------------------------------------

    def exp(self) -> "Tensor":
        val = np.exp(self.data)
        out = _result(val, (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, g * val)
            out._backward = backward
        return out

    def log(self) -> "Tensor":
        out = _result(np.log(self.data), (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, g / self.data)
            out._backward = backward
        return out

    def sqrt(self) -> "Tensor":
        val = np.sqrt(self.data)
        out = _result(val, (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, g * (0.5 / val))
            out._backward = backward
        return out

    def tanh(self) -> "Tensor":
        val = np.tanh(self.data)
        out = _result(val, (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, g * (1.0 - val * val))
            out._backward = backward
        return out

    def sigmoid(self) -> "Tensor":
        val = _stable_sigmoid(self.data)
        out = _result(val, (self,))
        if out.requires_grad:
            def backward(g):
                _accum(self, g * val * (1.0 - val))
            out._backward = backward
        return out

    def relu(self) -> "Tensor":
        out = _result(np.maximum(self.data, 0.0), (self,))
        if out.requires_grad:
            mask = self.data > 0
            def backward(g):
                _accum(self, g * mask)
            out._backward = backward
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Clamp values to [lo, hi]; gradient is zero where the clamp binds."""
        out = _result(np.clip(self.data, lo, hi), (self,))
        if out.requires_grad:
            mask = (self.data > lo) & (self.data < hi)
            def backward(g):
                _accum(self, g * mask)
            out._backward = backward
        return out

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))


# ---------------------------------------------------------------------
# graph plumbing


def _result(data: np.ndarray, inputs: tuple[Tensor, ...]) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    out = Tensor(data)
    if _GRAD_ENABLED:
        parents = tuple(t for t in inputs if t.requires_grad)
        if parents:
            out.requires_grad = True
            out._parents = parents
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _spread(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back to the un-reduced shape."""
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _axis_count(shape: tuple[int, ...], axis) -> int:
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def _basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis
               for p in parts)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------
# free functions


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (0 or 1)."""
    if axis not in (0, 1):
        raise ValueError("concat supports axis 0 or 1")
    ts = list(tensors)
    out = _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in ts]
        def backward(g):
            offset = 0
            for t, n in zip(ts, sizes):
                if t.requires_grad:
                    piece = g[offset:offset + n] if axis == 0 else g[:, offset:offset + n]
                    _accum(t, piece)
                offset += n
        out._backward = backward
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows by integer index; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    out = _result(x.data[idx], (x,))
    if out.requires_grad:
        def backward(g):
            z = np.zeros_like(x.data)
            np.add.at(z, idx, g)
            _accum(x, z)
        out._backward = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; rows sum to one."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = _result(val, (x,))
    if out.requires_grad:
        def backward(g):
            inner = (g * val).sum(axis=axis, keepdims=True)
            _accum(x, val * (g - inner))
        out._backward = backward
    return out


def topk_mean(scores: Tensor, k: int) -> Tensor:
    """Mean of the k largest entries of a 1-D tensor.

    Ties break toward the lowest index (stable selection), so the result and
    its gradient (1/k on the selected entries, 0 elsewhere) are deterministic.
    """
    if scores.data.ndim != 1:
        raise ValueError("topk_mean expects a 1-D tensor")
    n = scores.data.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    idx = np.argsort(-scores.data, kind="stable")[:k]
    out = _result(scores.data[idx].mean(), (scores,))
    if out.requires_grad:
        def backward(g):
            z = np.zeros_like(scores.data)
            z[idx] = g / k
            _accum(scores, z)
        out._backward = backward
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean / unit variance, then scale and shift."""
    m = x.mean(axis=-1, keepdims=True)
    d = x - m
    v = (d * d).mean(axis=-1, keepdims=True)
    return (d / (v + eps).sqrt()) * gamma + beta


def gelu(x: Tensor) -> Tensor:
    """Smooth GELU (tanh approximation)."""
    c = math.sqrt(2.0 / math.pi)
    inner = (x + (x * x * x) * 0.044715) * c
    return x * (inner.tanh() + 1.0) * 0.5


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    sq = (x * x).sum(axis=1, keepdims=True)
    return x / (sq + eps).sqrt()


def dws_conv1d(x: Tensor, depth_kernel: Tensor, point_kernel: Tensor) -> Tensor:
    """Depthwise-separable 1-D convolution over the time axis.

    ``x`` is (T, C); ``depth_kernel`` is (C, W) with W odd, applied per
    channel along time with replicate padding ("same" output length);
    ``point_kernel`` is (C, C') and mixes channels. Output row t depends only
    on input rows t-W//2 .. t+W//2.
    """
    if x.data.ndim != 2 or depth_kernel.data.ndim != 2 or point_kernel.data.ndim != 2:
        raise ValueError("dws_conv1d expects 2-D tensors")
    t_len, channels = x.data.shape
    if depth_kernel.data.shape[0] != channels:
        raise ValueError(
            f"depth kernel has {depth_kernel.data.shape[0]} channels, input has {channels}")
    if point_kernel.data.shape[0] != channels:
        raise ValueError(
            f"point kernel has {point_kernel.data.shape[0]} input channels, input has {channels}")
    width = depth_kernel.data.shape[1]
    if width % 2 == 0:
        raise ValueError(f"kernel width must be odd, got {width}")
    half = width // 2
    if half > 0:
        front = [x[0:1] for _ in range(half)]
        back = [x[t_len - 1:t_len] for _ in range(half)]
        padded = concat(front + [x] + back, axis=0)
    else:
        padded = x
    acc: Tensor | None = None
    for j in range(width):
        term = padded[j:j + t_len] * depth_kernel[:, j]
        acc = term if acc is None else acc + term
    return acc @ point_kernel


def multi_head_self_attention(
    x: Tensor,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Standard scaled dot-product self-attention over the rows of ``x``.

    ``x`` is (n, d) with d divisible by ``heads``. Each output row is, per
    head, a convex combination of value rows (attention rows sum to one).
    With ``return_weights`` the per-head attention matrices are also returned.
    """
    n, d = x.data.shape
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    q = x @ wq + bq
    k = x @ wk + bk
    v = x @ wv + bv
    outs = []
    weights = []
    for h in range(heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = q[cols], k[cols], v[cols]
        attn = softmax((qh @ kh.T) * scale, axis=-1)
        outs.append(attn @ vh)
        weights.append(attn)
    merged = outs[0] if heads == 1 else concat(outs, axis=1)
    out = merged @ wo + bo
    if return_weights:
        return out, weights
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout driven by an explicit generator."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    return x * Tensor(keep / (1.0 - rate))


# ---------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    note: str = ""

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_err)


@dataclass
class GradCheckReport:
    """Per-parameter comparison of tape gradients vs central differences."""

    entries: list[GradCheckEntry] = field(default_factory=list)
    h: float = 1e-5
    tol: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.passed and e.max_rel_err <= self.tol for e in self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not (e.passed and e.max_rel_err <= self.tol)]

    def summary(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok" if e.passed and e.max_rel_err <= self.tol else "FAIL"
            extra = f" ({e.note})" if e.note else ""
            lines.append(f"{e.name}: max_rel_err={e.max_rel_err:.3e} {status}{extra}")
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]] | dict,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the tape gradient of ``f()`` against central finite differences.

    ``f`` must rebuild the graph on every call and return a scalar; ``params``
    are the float64 leaves to perturb. The relative error for one element is
    |analytic - numeric| / max(1, |analytic|, |numeric|), so near-zero
    gradients are judged on absolute error. A non-finite objective at a
    perturbed point marks the parameter as failed with its location.
    """
    named = list(params.items()) if isinstance(params, dict) else list(params)
    for name, p in named:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters ({name} is {p.data.dtype})")
    for _, p in named:
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ValueError("grad_check objective must be scalar")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in named
    }
    report = GradCheckReport(h=h, tol=tol)
    for name, p in named:
        ana = analytic[name]
        worst = GradCheckEntry(name=name, max_rel_err=0.0, worst_index=-1,
                               analytic=0.0, numeric=0.0)
        for flat_i, index in enumerate(np.ndindex(p.data.shape)):
            orig = p.data[index]
            p.data[index] = orig + h
            with no_grad():
                f_plus = float(f().data)
            p.data[index] = orig - h
            with no_grad():
                f_minus = float(f().data)
            p.data[index] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                worst = GradCheckEntry(
                    name=name, max_rel_err=math.inf, worst_index=flat_i,
                    analytic=float(ana[index]), numeric=math.nan,
                    note=f"non-finite objective at {name}[{flat_i}]")
                break
            numeric = (f_plus - f_minus) / (2.0 * h)
            a_val = float(ana[index])
            rel = abs(a_val - numeric) / max(1.0, abs(a_val), abs(numeric))
            if rel > worst.max_rel_err:
                worst = GradCheckEntry(name=name, max_rel_err=rel, worst_index=flat_i,
                                       analytic=a_val, numeric=numeric)
        report.entries.append(worst)
    return report

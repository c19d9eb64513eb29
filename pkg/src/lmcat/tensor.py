"""Minimal dense tensor with reverse-mode differentiation.

Each forward op returns a new :class:`Tensor` that remembers its parents and a
closure computing their gradient contributions. Every tensor carries a global
creation sequence number; :meth:`Tensor.backward` processes the reachable
graph in strictly decreasing sequence order, which is the exact reverse of
execution order. Gradients accumulate additively into ``.grad`` and are never
cleared implicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError

_seq = itertools.count()
_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the post-op finiteness assertion. Returns the previous setting."""
    global _check_finite
    prev = _check_finite
    _check_finite = bool(enabled)
    return prev


class Tensor:
    """Dense float array with an optional gradient buffer.

    Args:
        data: array-like; lists and scalars become float64.
        requires_grad: whether gradients should be accumulated for this tensor.
        name: optional label, used by parameters and error messages.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # -- autograd ----------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._seq, reverse=True)

        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        self._accumulate(seed)
        for node in nodes:
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # interior buffers are not needed once propagated
            node.grad = None

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        bad = [p for p in parents if not np.all(np.isfinite(p.data))]
        if not bad:
            raise FloatingPointError("non-finite value produced from finite inputs")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    ref = ta if ta is not None else tb
    if ta is None:
        ta = Tensor(np.asarray(a, dtype=ref.dtype))
    if tb is None:
        tb = Tensor(np.asarray(b, dtype=ref.dtype))
    return ta, tb


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out)

    return _result(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g / x.data)

    return _result(np.log(x.data), (x,), backward)


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    flat = _rows(x.data) if x.ndim else x.data.reshape(1, 1)
    out = kernels.gelu_forward(flat).reshape(x.shape)

    def backward(g):
        gx = kernels.gelu_backward(flat, _rows(g) if g.ndim else g.reshape(1, 1))
        x._accumulate(gx.reshape(x.shape))

    return _result(out, (x,), backward)


# -- shape ops ---------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return _result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        x._accumulate(full)

    return _result(np.array(x.data[idx], copy=True), (x,), backward)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, k, axis=axis))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(bounds[k], bounds[k + 1])
                t._accumulate(g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- reductions --------------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.sum(axis=axes, keepdims=keepdims) / count

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g / count, x.shape))

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward)


# -- linear algebra ----------------------------------------------------------
def _swap_last(x: np.ndarray) -> np.ndarray:
    # strided stacks drop numpy's matmul off the BLAS path
    if x.ndim == 2:
        return x.T
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        g = np.ascontiguousarray(g)
        if a.requires_grad:
            if a.ndim == 2 and b.ndim > 2:
                # shared left operand: fold the batch into one 2D product
                bt = np.swapaxes(b.data, -1, -2).reshape(-1, a.shape[1])
                ga = np.moveaxis(g, -2, 0).reshape(a.shape[0], -1) @ bt
                a._accumulate(ga)
            else:
                a._accumulate(_unbroadcast(g @ _swap_last(b.data), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold leading axes into rows
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(_unbroadcast(_swap_last(a.data) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


# -- fused row ops -----------------------------------------------------------
def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``scale * x``, max-subtracted."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ContractError("softmax_rows needs a non-empty last axis")
    flat = _rows(x.data)
    y = kernels.softmax_rows(flat, float(scale))

    def backward(g):
        x._accumulate(kernels.softmax_rows_backward(y, _rows(g), float(scale)).reshape(x.shape))

    return _result(y.reshape(x.shape), (x,), backward)


def log_softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    flat = _rows(x.data)
    y = kernels.log_softmax_rows(flat, float(scale))

    def backward(g):
        g2 = _rows(g)
        p = np.exp(y)
        x._accumulate((scale * (g2 - p * g2.sum(axis=1, keepdims=True))).reshape(x.shape))

    return _result(y.reshape(x.shape), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply ``gamma, beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs feature dim {d}")
    flat = _rows(x.data)
    y, xhat, rstd = kernels.layer_norm_forward(
        flat, np.ascontiguousarray(gamma.data, dtype=x.dtype), np.ascontiguousarray(beta.data, dtype=x.dtype), eps
    )

    def backward(g):
        dx, dg, db = kernels.layer_norm_backward(_rows(g), xhat, rstd, np.ascontiguousarray(gamma.data, dtype=x.dtype))
        if x.requires_grad:
            x._accumulate(dx.reshape(x.shape))
        if gamma.requires_grad:
            gamma._accumulate(dg)
        if beta.requires_grad:
            beta._accumulate(db)

    return _result(y.reshape(x.shape), (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [B, C] and labels [B], got {logits.shape}, {labels.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes}): {labels.tolist()}")
    batch = logits.shape[0]
    logp = kernels.log_softmax_rows(np.ascontiguousarray(logits.data), 1.0)
    rows = np.arange(batch)
    loss = -logp[rows, labels].sum() / batch

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        logits._accumulate(p * (g / batch))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def info_nce_rows(scores: Tensor, tau: float) -> Tensor:
    """Per-row InfoNCE whose positive is the row's own index: ``lse_k(S_nk/tau) - S_nn/tau``.

    ``scores`` has shape (..., N, L) with ``L >= N``; columns past ``N`` act as
    extra negatives. The result has shape (..., N).
    """
    n = scores.shape[-2] if scores.ndim >= 2 else 0
    if scores.ndim < 2 or scores.shape[-1] < n:
        raise ShapeError(f"info_nce_rows expects trailing dims (N, L>=N), got {scores.shape}")
    inv = 1.0 / tau
    logp = kernels.log_softmax_rows(_rows(scores.data), inv).reshape(scores.shape)
    idx = np.arange(n)
    out = -logp[..., idx, idx]

    def backward(g):
        grad = np.exp(logp)
        grad[..., idx, idx] -= 1.0
        grad *= g[..., :, None] * inv
        scores._accumulate(grad)

    return _result(np.ascontiguousarray(out), (scores,), backward)


def avg_pool_grid(x: Tensor, side: int, factor: int) -> Tensor:
    """Average-pool tokens laid out row-major on a ``side x side`` grid.

    ``x`` has shape (..., side*side, D); returns (..., (side//factor)**2, D).
    """
    lead = x.shape[:-2]
    d = x.shape[-1]
    s2 = side // factor
    g = reshape(x, lead + (s2, factor, s2, factor, d))
    nl = len(lead)
    pooled = mean(g, axis=(nl + 1, nl + 3))
    return reshape(pooled, lead + (s2 * s2, d))


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    total = 0.0
    for a in arrays:
        total += float(np.dot(a.reshape(-1).astype(np.float64), a.reshape(-1).astype(np.float64)))
    return math.sqrt(total)


def gather_unique(x: Tensor, idx) -> Tensor:
    """Advanced-index gather whose index set is known to be duplicate-free.

    Backward scatters with plain assignment, which is much cheaper than the
    accumulate-at path ``getitem`` needs for general fancy indexing.
    """

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return _result(np.ascontiguousarray(x.data[idx]), (x,), backward)

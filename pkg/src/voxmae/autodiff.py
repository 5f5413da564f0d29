"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a contiguous float32/float64 numpy array plus an optional
node in the computation graph (parent tensors and a closure computing parent
gradients from the output gradient). `Tensor.backward()` runs one reverse
topological sweep, accumulating gradients additively where subexpressions
are shared.

Two guarantees the rest of the package leans on:

* every forward op validates that its output is finite and raises
  `NumericsError` naming the op otherwise, so NaN/Inf never propagate
  silently;
* tensors are immutable once created (the optimizer swaps parameter data
  between steps), so graphs can be shared read-only across threads.

`grad_check` provides the finite-difference oracle used to validate every
differentiable op here and the full models downstream.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericsError

_DTYPES = (np.float32, np.float64)
_uid_counter = itertools.count()

# Ops that only move values around can never create NaN/Inf from finite
# inputs, so their outputs are not re-checked.
_VALUE_PRESERVING = frozenset(
    {"reshape", "transpose", "neg", "concat", "gather_tokens", "scatter_tokens"})

_grad_enabled = True


class no_grad:
    """Context manager: ops built inside record no graph (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(op: str, data: np.ndarray) -> None:
    if op in _VALUE_PRESERVING:
        return
    # One float reduction instead of a full isfinite pass: any NaN/Inf in the
    # data makes the sum non-finite.
    if not math.isfinite(float(np.sum(data))):
        if np.all(np.isfinite(data)):
            return  # huge-but-finite values overflowed the reduction only
        raise NumericsError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array node in a reverse-mode autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "uid", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _DTYPES:
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.uid = next(_uid_counter)
        self.op = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _from_op(op: str, data: np.ndarray, parents: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], tuple]) -> "Tensor":
        _check_finite(op, data)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        out.uid = next(_uid_counter)
        out.op = op
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- coercion ----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        data = self.data + other.data
        return Tensor._from_op("add", data, (self, other), lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        data = self.data - other.data
        return Tensor._from_op("sub", data, (self, other), lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        data = self.data * other.data
        return Tensor._from_op("mul", data, (self, other), lambda g: (
            _unbroadcast(g * other.data, self.shape),
            _unbroadcast(g * self.data, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        data = self.data / other.data
        return Tensor._from_op("div", data, (self, other), lambda g: (
            _unbroadcast(g / other.data, self.shape),
            _unbroadcast(-g * self.data / (other.data * other.data), other.shape)))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return Tensor._from_op("neg", -self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise ContractError("only constant exponents are differentiable here")
        data = self.data ** exponent
        return Tensor._from_op("pow", data, (self,), lambda g: (
            g * exponent * self.data ** (exponent - 1),))

    # -- matmul --------------------------------------------------------------

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ContractError(f"matmul requires rank >= 2 operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ContractError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        data = np.matmul(a, b)

        def backward(g):
            ga = _unbroadcast(np.matmul(g, b.swapaxes(-1, -2)), a.shape)
            gb = _unbroadcast(np.matmul(a.swapaxes(-1, -2), g), b.shape)
            return ga, gb

        return Tensor._from_op("matmul", data, (self, other), backward)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = np.ascontiguousarray(self.data).reshape(shape)
        return Tensor._from_op("reshape", data, (self,), lambda g: (g.reshape(old),))

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        data = np.ascontiguousarray(self.data.transpose(axes))
        return Tensor._from_op("transpose", data, (self,), lambda g: (g.transpose(inv),))

    def swap(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    # -- reductions -------------------------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(self.dtype),)
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            if not keepdims:
                g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op("sum", np.asarray(data), (self,), backward)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = 1
            for a in axes:
                count *= self.shape[a % self.ndim]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- backward pass ------------------------------------------------------------

    def _topo_order(self) -> list["Tensor"]:
        """Iterative post-order over the requires_grad subgraph."""
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Accumulate gradients of this scalar into `.grad` of every
        requires_grad tensor in its graph. Each graph edge is visited once."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward on a tensor that does not require grad")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topo_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None


# -- free-function ops --------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return Tensor._from_op("concat", data, tuple(tensors), backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return Tensor._from_op("exp", data, (x,), lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)
    return Tensor._from_op("log", data, (x,), lambda g: (g / x.data,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtracted)."""
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} out of bounds for rank {x.ndim}")
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._from_op("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"log_softmax axis {axis} out of bounds for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op("log_softmax", out, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU activation, tanh approximation (differentiable everywhere)."""
    d = x.data
    d2 = d * d
    inner = d2 * 0.044715
    inner += 1.0
    inner *= d
    inner *= _GELU_C
    t = np.tanh(inner)
    out = t + 1.0
    out *= d
    out *= 0.5

    def backward(g):
        d_inner = d2 * (3 * 0.044715)
        d_inner += 1.0
        d_inner *= _GELU_C
        grad = 1.0 - t * t
        grad *= d_inner
        grad *= 0.5 * d
        grad += 0.5 * (1.0 + t)
        return (g * grad,)

    return Tensor._from_op("gelu", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    gamma and beta must match the last dimension of x.
    """
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ContractError(
            f"layer_norm gamma/beta must have shape ({n},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return Tensor._from_op("layer_norm", out, (x, gamma, beta), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


def gather_tokens(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along the token axis (axis -2).

    x is (N, d) with index (V,), or batched (B, N, d) with index (B, V).
    Backward scatters gradients back to the selected rows.
    """
    idx = np.asarray(index)
    if x.ndim == 2 and idx.ndim == 1:
        data = x.data[idx]

        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return (gx,)

    elif x.ndim == 3 and idx.ndim == 2:
        data = np.take_along_axis(x.data, idx[:, :, None], axis=1)

        def backward(g):
            gx = np.zeros_like(x.data)
            bidx = np.arange(x.shape[0])[:, None]
            np.add.at(gx, (bidx, idx), g)
            return (gx,)

    else:
        raise ContractError(f"gather_tokens: unsupported ranks x={x.shape}, index={idx.shape}")
    return Tensor._from_op("gather_tokens", np.ascontiguousarray(data), (x,), backward)


def scatter_tokens(visible: Tensor, fill: Tensor, visible_index: np.ndarray,
                   masked_index: np.ndarray, total: int) -> Tensor:
    """Assemble a full token sequence: visible rows at their original slots,
    the shared `fill` vector everywhere else.

    visible is (V, d) with 1-D indices, or (B, V, d) with (B, *) indices.
    fill is a (d,) vector broadcast into every masked slot.
    """
    vidx = np.asarray(visible_index)
    midx = np.asarray(masked_index)
    d = visible.shape[-1]
    if fill.shape != (d,):
        raise ContractError(f"fill vector must have shape ({d},), got {fill.shape}")
    if visible.ndim == 2 and vidx.ndim == 1:
        data = np.empty((total, d), dtype=visible.dtype)
        data[midx] = fill.data
        data[vidx] = visible.data

        def backward(g):
            gv = g[vidx]
            gf = g[midx].sum(axis=0)
            return np.ascontiguousarray(gv), gf

    elif visible.ndim == 3 and vidx.ndim == 2:
        b = visible.shape[0]
        data = np.empty((b, total, d), dtype=visible.dtype)
        bidx = np.arange(b)[:, None]
        data[bidx, midx] = fill.data
        data[bidx, vidx] = visible.data

        def backward(g):
            gv = g[bidx, vidx]
            gf = g[bidx, midx].reshape(-1, d).sum(axis=0)
            return np.ascontiguousarray(gv), gf

    else:
        raise ContractError(
            f"scatter_tokens: unsupported ranks visible={visible.shape}, index={vidx.shape}")
    return Tensor._from_op("scatter_tokens", data, (visible, fill), backward)


# -- gradient collection ---------------------------------------------------------


class GradientMap(dict):
    """Mapping from parameter name to gradient array (same shape as the
    parameter). Missing-from-graph parameters get explicit zero entries."""

    def total_norm(self) -> float:
        sq = 0.0
        for g in self.values():
            sq += float((g.astype(np.float64) ** 2).sum())
        return math.sqrt(sq)


def backward(loss: Tensor, params: dict[str, Tensor]) -> GradientMap:
    """Reverse sweep from a scalar loss; returns one gradient per named
    parameter, zero-filled for parameters the loss does not touch."""
    for p in params.values():
        p.grad = None
    loss.backward()
    out = GradientMap()
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


# -- finite-difference oracle ------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f(*inputs)` must return a scalar tensor and must be differentiable;
    inputs should be float64 (central differences are unreliable in single
    precision). Relative error uses max(|analytic|, |numeric|, 1e-12) as
    denominator, per coordinate.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires double-precision inputs")
        t.grad = None
    loss = f(*inputs)
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("grad_check: f must return a scalar Tensor")
    if not loss.requires_grad:
        raise ContractError(
            "grad_check: f is not differentiable w.r.t. its inputs "
            "(a non-differentiable op broke the graph)")
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(*inputs).data)
            flat[i] = orig - eps
            lo = float(f(*inputs).data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(ana.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def gradcheck_cases(rng) -> dict[str, float]:
    """Run the finite-difference oracle over every differentiable op in this
    module, three seeded random inputs each. Returns op -> max relative error."""

    def t(shape, stream):
        return Tensor(rng.child(stream).normal(shape, dtype=np.float64), requires_grad=True, dtype=np.float64)

    results: dict[str, float] = {}
    for trial in range(3):
        def reg(name, fn, *inputs):
            err = grad_check(fn, inputs)
            results[name] = max(results.get(name, 0.0), err)

        a = t((3, 4), f"a{trial}")
        b = t((3, 4), f"b{trial}")
        m1 = t((3, 3), f"m1{trial}")
        m2 = t((3, 3), f"m2{trial}")
        reg("add", lambda x, y: (x + y).sum(), a, b)
        reg("sub", lambda x, y: (x - y).sum(), a, b)
        reg("mul", lambda x, y: (x * y).sum(), a, b)
        reg("div", lambda x, y: (x / (y * y + 1.0)).sum(), a, b)
        reg("neg", lambda x: (-x * x).sum(), a)
        reg("pow", lambda x: (x ** 3).sum(), a)
        reg("matmul", lambda x, y: ((x @ y) ** 2).sum(), m1, m2)
        reg("reshape", lambda x: (x.reshape(4, 3) ** 2).sum(), a)
        reg("transpose", lambda x: (x.transpose((1, 0)) ** 2).sum(), a)
        reg("sum", lambda x: (x.sum(axis=1) ** 2).sum(), a)
        reg("mean", lambda x: (x.mean(axis=0) ** 2).sum(), a)
        reg("concat", lambda x, y: (concat([x, y], axis=1) ** 2).sum(), a, b)
        reg("exp", lambda x: exp(x * 0.3).sum(), a)
        reg("log", lambda x: log(x * x + 1.0).sum(), a)
        reg("softmax", lambda x: (softmax(x, axis=1) ** 2).sum(), a)
        reg("log_softmax", lambda x: (log_softmax(x, axis=1) ** 2).sum(), a)
        reg("gelu", lambda x: (gelu(x) ** 2).sum(), a)
        g = t((4,), f"g{trial}")
        bt = t((4,), f"bt{trial}")
        reg("layer_norm", lambda x, gm, bb: (layer_norm(x, gm, bb, 1e-5) ** 2).sum(), a, g, bt)
        vis_idx = np.array([0, 2])
        reg("gather_tokens", lambda x: (gather_tokens(x, vis_idx) ** 2).sum(), a)
        fill = t((4,), f"fill{trial}")
        vi, mi = np.array([0, 2]), np.array([1, 3, 4])
        v = t((2, 4), f"v{trial}")
        reg("scatter_tokens", lambda x, fl: (scatter_tokens(x, fl, vi, mi, 5) ** 2).sum(), v, fill)
    return results

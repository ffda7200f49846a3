"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Just enough machinery to train the toy detector: elementwise ops,
matmul, conv2d, reductions, gather/reshape plumbing, detach, and a
custom-gradient escape hatch for straight-through estimators.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class GraphNode:
    """Backward-pass record for one operation."""

    __slots__ = ("op", "parents", "backward_fn", "visits")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward_fn):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn  # upstream ndarray -> tuple of grads (or None)
        self.visits = 0


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node")

    def __init__(self, values, requires_grad: bool = False, node: Optional[GraphNode] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) or node is not None
        self.node = node

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # -- graph construction helpers ---------------------------------------

    @staticmethod
    def _result(values: np.ndarray, op: str, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(values, node=GraphNode(op, parents, backward_fn))
        return Tensor(values)

    def detach(self) -> "Tensor":
        """Value-identical tensor severed from the graph."""
        return Tensor(self.values.copy())

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        out = self.values + other.values
        return Tensor._result(out, "add", (self, other), lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        out = self.values - other.values
        return Tensor._result(out, "sub", (self, other), lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        out = self.values * other.values
        return Tensor._result(out, "mul", (self, other), lambda g: (
            _unbroadcast(g * other.values, self.shape),
            _unbroadcast(g * self.values, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = self.values / other.values
        return Tensor._result(out, "div", (self, other), lambda g: (
            _unbroadcast(g / other.values, self.shape),
            _unbroadcast(-g * self.values / other.values ** 2, other.shape)))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return Tensor._result(-self.values, "neg", (self,), lambda g: (-g,))

    def __pow__(self, other):
        return power(self, other)

    # -- unary elementwise ---------------------------------------------------

    def exp(self):
        out = np.exp(self.values)
        return Tensor._result(out, "exp", (self,), lambda g: (g * out,))

    def log(self):
        if np.any(self.values <= 0):
            raise ValueError("log requires strictly positive input")
        return Tensor._result(np.log(self.values), "log", (self,),
                              lambda g: (g / self.values,))

    def abs(self):
        sign = np.sign(self.values)
        return Tensor._result(np.abs(self.values), "abs", (self,),
                              lambda g: (g * sign,))

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.values))
        return Tensor._result(out, "sigmoid", (self,),
                              lambda g: (g * out * (1.0 - out),))

    def relu(self):
        mask = self.values > 0
        return Tensor._result(np.where(mask, self.values, 0.0), "relu", (self,),
                              lambda g: (g * mask,))

    def clamp(self, lo: float, hi: float):
        mask = (self.values > lo) & (self.values < hi)
        return Tensor._result(np.clip(self.values, lo, hi), "clamp", (self,),
                              lambda g: (g * mask,))

    # -- shape plumbing ------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(self.values.reshape(shape), "reshape", (self,),
                              lambda g: (g.reshape(old),))

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return Tensor._result(self.values.transpose(axes), "transpose", (self,),
                              lambda g: (g.transpose(inv),))

    def take(self, indices, axis: int = 0):
        """Gather along an axis; backward scatter-adds."""
        idx = np.asarray(indices, dtype=np.intp)
        out = np.take(self.values, idx, axis=axis)
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=np.float64)
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            return (full,)

        return Tensor._result(out, "take", (self,), backward)

    # -- reductions ------------------------------------------------------------

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def max(self, axes=None):
        return reduce("max", self, axes)

    # -- backward ------------------------------------------------------------

    def backward(self):
        if self.values.size != 1:
            raise ValueError("backward requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.values)
                    t.grad += g
                continue
            t.node.visits += 1
            parent_grads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg

    def zero_grad(self):
        self.grad = None


# -- free functions --------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def power(base, exponent) -> Tensor:
    """base ** exponent with derivatives in both arguments; pow(0, 0) == 1."""
    base = as_tensor(base)
    exponent = as_tensor(exponent)
    b, e = base.values, exponent.values
    if np.any(b < 0):
        scalar_int = e.size == 1 and float(e.reshape(-1)[0]).is_integer()
        if not scalar_int:
            raise ValueError("pow with negative base requires an integer scalar exponent")
    out = np.power(b, e)
    zero_zero = (b == 0) & (e == 0)
    if np.any(zero_zero):
        out = np.where(zero_zero, 1.0, out)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gb = e * np.power(b, e - 1.0)
            ge = out * np.log(np.where(b > 0, b, 1.0))
        gb = np.where(b == 0, np.where(e == 1, 1.0, 0.0), gb)
        ge = np.where(b > 0, ge, 0.0)
        return (_unbroadcast(g * gb, base.shape), _unbroadcast(g * ge, exponent.shape))

    return Tensor._result(out, "pow", (base, exponent), backward)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.values >= b.values  # ties route to the first argument
    out = np.where(pick_a, a.values, b.values)
    return Tensor._result(out, "max", (a, b), lambda g: (
        _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.values <= b.values
    out = np.where(pick_a, a.values, b.values)
    return Tensor._result(out, "min", (a, b), lambda g: (
        _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def reduce(op_tag: str, t: Tensor, axes=None) -> Tensor:
    if t.values.size == 0:
        raise ValueError("reduction over an empty tensor")
    if axes is None:
        axes_t = tuple(range(t.values.ndim))
    elif isinstance(axes, int):
        axes_t = (axes,)
    else:
        axes_t = tuple(axes)
    for ax in axes_t:
        if not -t.values.ndim <= ax < t.values.ndim:
            raise ValueError(f"axis {ax} out of range for shape {t.shape}")
    axes_t = tuple(sorted(ax % t.values.ndim for ax in axes_t))
    shape = t.shape
    if op_tag == "sum" or op_tag == "mean":
        out = t.values.sum(axis=axes_t)
        count = 1
        for ax in axes_t:
            count *= shape[ax]
        if op_tag == "mean":
            out = out / count

        def backward(g):
            g_full = np.expand_dims(g, axes_t) if np.ndim(g) != len(shape) else g
            g_b = np.broadcast_to(g_full, shape).astype(np.float64)
            return (g_b / count if op_tag == "mean" else g_b.copy(),)

        return Tensor._result(out, op_tag, (t,), backward)
    if op_tag == "max":
        out = t.values.max(axis=axes_t)

        def backward_max(g):
            g_full = np.expand_dims(g, axes_t) if np.ndim(g) != len(shape) else g
            out_full = np.expand_dims(out, axes_t)
            hit = t.values == np.broadcast_to(out_full, shape)
            # route to the first argmax only
            moved = np.moveaxis(hit, axes_t, range(len(axes_t)))
            flat = moved.reshape(-1, *moved.shape[len(axes_t):])
            first = np.zeros_like(flat)
            idx = flat.argmax(axis=0)
            np.put_along_axis(first, idx[None], 1.0, axis=0)
            first = np.moveaxis(first.reshape(moved.shape), range(len(axes_t)), axes_t)
            return (np.broadcast_to(g_full, shape) * first,)

        return Tensor._result(out, "max", (t,), backward_max)
    raise ValueError(f"unknown reduction {op_tag!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.values @ b.values
    return Tensor._result(out, "matmul", (a, b), lambda g: (
        g @ b.values.T, a.values.T @ g))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
    return cols.reshape(n, c * kh * kw, h_out * w_out), h_out, w_out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with KCkk weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d requires odd kernel extents")
    cols, h_out, w_out = _im2col(x.values, kh, kw, stride, padding)
    w2 = weight.values.reshape(k, c * kh * kw)
    out = np.matmul(w2, cols).reshape(n, k, h_out, w_out)

    def backward(g):
        gy = g.reshape(n, k, h_out * w_out)
        gw = np.matmul(gy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(w2.T, gy).reshape(n, c, kh, kw, h_out, w_out)
        gx_p = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gx_p[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += gcols[:, :, i, j]
        if padding:
            gx = gx_p[:, :, padding:padding + h, padding:padding + w]
        else:
            gx = gx_p
        return (gx, gw)

    return Tensor._result(out, "conv2d", (x, weight), backward)


def custom_grad(forward_fn: Callable, backward_fn: Callable, *inputs) -> Tensor:
    """Run forward_fn on raw arrays and install backward_fn as the gradient rule.

    backward_fn(upstream, *input_arrays) must return one array per input,
    shape-matching; use None to block a gradient.
    """
    tensors = [as_tensor(x) for x in inputs]
    arrays = [t.values for t in tensors]
    out = np.asarray(forward_fn(*arrays), dtype=np.float64)

    def backward(g):
        grads = backward_fn(g, *arrays)
        if not isinstance(grads, (tuple, list)):
            grads = (grads,)
        if len(grads) != len(tensors):
            raise ValueError("custom_grad backward returned wrong arity")
        for gr, t in zip(grads, tensors):
            if gr is not None and np.shape(gr) != t.shape:
                raise ValueError("custom_grad backward returned mismatched shape")
        return tuple(grads)

    return Tensor._result(out, "custom", tensors, backward)


@dataclass
class GradCheckResult:
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tol


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5, tol: float = 1e-4) -> GradCheckResult:
    """Compare analytic gradients of scalar f against central differences."""
    probe = Tensor(x.values.copy(), requires_grad=True)
    loss = f(probe)
    loss.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.values)
    numeric = np.zeros_like(probe.values)
    flat = probe.values.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(probe.values)).values)
        flat[i] = orig - step
        lo = float(f(Tensor(probe.values)).values)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(1.0, np.abs(numeric))
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckResult(max_rel_err=max_rel, tol=tol)

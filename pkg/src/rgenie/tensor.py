"""Dense multi-dimensional tensors with reverse-mode automatic differentiation.

Everything in this package that needs gradients runs on these tensors. The
implementation is a tape over numpy arrays: each op records its parents and a
backward closure, `backward()` walks the tape in reverse topological order.
Verification code runs the same graphs in float64 and compares against central
finite differences (`grad_check`).
"""
from __future__ import annotations

import warnings

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class ContractError(RuntimeError):
    """Raised when a documented precondition is violated."""


class InputError(ValueError):
    """Raised on invalid numeric input (NaN features, bad ids, ...)."""


def _as_array(x, dtype=None):
    if isinstance(x, Tensor):
        raise TypeError("expected raw array-like, got Tensor")
    return np.asarray(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense row-major array plus optional gradient tape node.

    Tensors created by ops carry the saved inputs needed for backward and for
    bit-exact forward replay (`ComputationRecord`).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_fwd", "empty_mask_flag")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = "leaf"
        self._fwd = None
        self.empty_mask_flag = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward_fn, op: str, fwd=None):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward_fn = backward_fn if out.requires_grad else None
        out._op = op
        out._fwd = fwd
        out.empty_mask_flag = False
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def _topo(self):
        order, seen, stack = [], set(), [(self, False)]
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

    def backward(self, grad=None):
        """Reverse-mode sweep; accumulates into `.grad` of every grad leaf."""
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with requires_grad=False")
        if grad is None:
            if self.data.size != 1:
                raise ContractError("implicit backward requires a scalar output")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        if grads:  # pragma: no cover - defensive
            raise ContractError("dangling gradient in backward sweep")

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, powr(other, -1.0))
        return mul(self, 1.0 / np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sumt(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return meant(self, axis, keepdims)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# -- elementwise / structural ops ---------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(data, (a, b), bwd, "add", lambda x, y: x + y)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(data, (a, b), bwd, "mul", lambda x, y: x * y)


def powr(a: Tensor, p: float) -> Tensor:
    data = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._from_op(data, (a,), bwd, "pow", lambda x: x ** p)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return Tensor._from_op(data, (a,), bwd, "exp", np.exp)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return Tensor._from_op(data, (a,), bwd, "log", np.log)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / data,)

    return Tensor._from_op(data, (a,), bwd, "sqrt", np.sqrt)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - data * data),)

    return Tensor._from_op(data, (a,), bwd, "tanh", np.tanh)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * data * (1.0 - data),)

    return Tensor._from_op(data, (a,), bwd, "sigmoid",
                           lambda x: 1.0 / (1.0 + np.exp(-x)))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    def fwd(x):
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))

    return Tensor._from_op(data, (a,), bwd, "gelu", fwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0),)

    return Tensor._from_op(data, (a,), bwd, "relu", lambda x: np.maximum(x, 0.0))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; both operands at least 2-D, inner extents equal."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-D operands: {a.data.shape} x {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor._from_op(data, (a, b), bwd, "matmul", np.matmul)


def reshape(a: Tensor, shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)
    src = a.data.shape

    def bwd(g):
        return (g.reshape(src),)

    return Tensor._from_op(data, (a,), bwd, "reshape", lambda x: x.reshape(shape))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = a.data.swapaxes(ax1, ax2)

    def bwd(g):
        return (g.swapaxes(ax1, ax2),)

    return Tensor._from_op(data, (a,), bwd, "swapaxes",
                           lambda x: x.swapaxes(ax1, ax2))


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(data, (a,), bwd, "getitem", lambda x: x[idx])


def concat(tensors, axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return Tensor._from_op(data, tuple(tensors), bwd, "concat",
                           lambda *xs: np.concatenate(xs, axis=axis))


def sumt(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor._from_op(data, (a,), bwd, "sum",
                           lambda x: x.sum(axis=axis, keepdims=keepdims))


def meant(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sumt(a, axis, keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along `axis`."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    def fwd(x):
        s = x - x.max(axis=axis, keepdims=True)
        ee = np.exp(s)
        return ee / ee.sum(axis=axis, keepdims=True)

    return Tensor._from_op(data, (a,), bwd, "softmax", fwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    Constant inputs normalize to zeros (eps inside the square root), so the
    output is well-defined on zero-variance features.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    n = x.data.shape[-1]

    def bwd(g):
        gg = g * gain.data
        dxhat_sum = gg.sum(axis=-1, keepdims=True)
        dxhat_dot = (gg * xhat).sum(axis=-1, keepdims=True)
        gx = inv * (gg - dxhat_sum / n - xhat * dxhat_dot / n)
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gbias = _unbroadcast(g, bias.data.shape)
        return gx, ggain, gbias

    def fwd(xv, gv, bv):
        m = xv.mean(axis=-1, keepdims=True)
        c = xv - m
        v = (c * c).mean(axis=-1, keepdims=True)
        return c / np.sqrt(v + eps) * gv + bv

    return Tensor._from_op(data, (x, gain, bias), bwd, "layer_norm", fwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()} max={ids.max()}")
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor._from_op(data, (table,), bwd, "embedding_lookup",
                           lambda t: t[ids])


def take_positions(x: Tensor, idx) -> Tensor:
    """Gather x[b, idx[b], :] for each batch row b."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    data = x.data[rows, idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return Tensor._from_op(data, (x,), bwd, "take_positions",
                           lambda xv: xv[rows, idx])


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over positions where `mask` is set.

    logits: (..., K); targets: integer array matching the leading shape.
    Empty mask is defined as 0 and sets `empty_mask_flag` plus a warning.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"cross_entropy target shape {targets.shape} vs logits {logits.data.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("cross_entropy over an empty mask; defined as 0")
        out = mul(sumt(logits), 0.0)
        out.empty_mask_flag = True
        return out

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    data = np.asarray(-(picked * mask).sum() / count, dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(logp)
        grad = p.copy()
        np.put_along_axis(
            grad, targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        grad *= (mask[..., None] / count)
        return (g * grad,)

    def fwd(lv):
        s = lv - lv.max(axis=-1, keepdims=True)
        lp = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))
        pk = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
        return np.asarray(-(pk * mask).sum() / count, dtype=lv.dtype)

    return Tensor._from_op(data, (logits,), bwd, "cross_entropy", fwd)


# -- computation record ---------------------------------------------------


class ComputationRecord:
    """Topologically ordered view of the graph below an output tensor.

    `replay()` re-executes every recorded op on its saved inputs and checks
    the recomputed outputs are bit-identical to the recorded ones.
    """

    def __init__(self, output: Tensor):
        self.output = output
        order, seen, stack = [], set(), [(output, False)]
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
                stack.append((p, False))
        self.nodes = order  # parents before children

    def replay(self) -> bool:
        for node in self.nodes:
            if node._fwd is None or not node._parents:
                continue
            redo = node._fwd(*(p.data for p in node._parents))
            if not np.array_equal(np.asarray(redo), node.data):
                return False
        return True


# -- finite-difference oracle ----------------------------------------------


def grad_check(f, leaves, eps: float = 1e-5) -> float:
    """Worst relative error between backward grads and central differences.

    `f` is a zero-argument callable returning a scalar Tensor built from the
    given leaf tensors. Leaves must be float64 (verification mode).
    """
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 leaves")
        if not leaf.requires_grad:
            raise ContractError("grad_check leaf must have requires_grad=True")
        leaf.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ContractError("grad_check output must be scalar")
    out.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if abs(a - numeric) < 1e-12:
                err = 0.0
            worst = max(worst, err)
    return worst

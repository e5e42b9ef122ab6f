"""Reverse-mode automatic differentiation on dense float64 arrays.

The tape is dynamic: every primitive applied to a :class:`Tensor` that
(transitively) depends on a trainable leaf records its inputs and a local
reverse rule.  Calling :meth:`Tensor.backward` on a scalar walks the graph
once in reverse topological order and accumulates gradients into the
trainable leaves only.

Tensors that do not depend on any trainable leaf carry no graph at all, so
constant preprocessing (quadrature points, reference bases, targets) costs
nothing extra.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg
from scipy.linalg import lapack
from scipy.special import expit

from .errors import ShapeError, SingularMatrixError

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "broadcast_to",
    "sum",
    "mean",
    "concat",
    "stack",
    "getitem",
    "sin",
    "cos",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "square",
    "sqrt",
    "silu",
    "rms_norm",
    "scale",
    "linear_solve",
    "condition_estimate",
    "stop_gradient",
    "central_difference",
    "MAX_CONDITION",
]

MAX_CONDITION = 1e12
RMS_EPS = 1e-8


class Tensor:
    """Dense float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    # -- array-like conveniences ---------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return swap_last(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}{tag})"

    def __len__(self):
        return len(self.data)

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- reverse pass ----------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every trainable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeError("backward", self.shape, detail="root must be a scalar")
        if not self.requires_grad:
            return {}
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        touched = {}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                touched[id(node)] = node
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        return {n.name or id(n): n.grad for n in touched.values()}


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- arithmetic ----------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        "subtract",
    )


def mul(a, b):
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scale(a, b)
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "multiply",
    )


def scale(a, c):
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def div(a, b):
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scale(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * out / bd, bd.shape),
        )

    return _result(out, (a, b), backward, "divide")


def neg(a):
    return scale(a, -1.0)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


# -- shape manipulation --------------------------------------------------------


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a):
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape, detail="need at least 2 axes")
    return _result(
        np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose"
    )


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", src, tuple(shape)) from None
    return _result(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != ax and n != m for i, (n, m) in enumerate(zip(ref, t.shape))
        ):
            raise ShapeError("concatenate", ref, t.shape)
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(p, (slice, type(None), type(Ellipsis))) or (isinstance(p, (int, np.integer)) and not isinstance(p, bool))
        for p in parts
    )


def getitem(a, idx):
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    src = a.shape
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros(src)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), backward, "slice")


# -- elementwise ---------------------------------------------------------------


def _unary(a, fwd, dfwd, op):
    a = as_tensor(a)
    x = a.data
    y = fwd(x)
    return _result(y, (a,), lambda g: (g * dfwd(x, y),), op)


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x), "sin")


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x), "cos")


def exp(a):
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def sigmoid(a):
    return _unary(a, expit, lambda x, y: y * (1.0 - y), "sigmoid")


def square(a):
    return _unary(a, np.square, lambda x, y: 2.0 * x, "square")


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def silu(a):
    """x * sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    s = expit(x)
    return _result(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def rms_norm(a, eps=RMS_EPS):
    """Divide by the root-mean-square over the last axis."""
    a = as_tensor(a)
    x = a.data
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    y = x / r

    def backward(g):
        return ((g - y * np.mean(g * y, axis=-1, keepdims=True)) / r,)

    return _result(y, (a,), backward, "rms_norm")


def stop_gradient(a):
    return Tensor(as_tensor(a).data)


# -- small dense solve ---------------------------------------------------------


def _lu(A):
    n = A.shape[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    anorm = np.abs(A).sum(axis=0).max() if n else 0.0
    if not np.all(np.isfinite(lu)):
        return lu, piv, np.inf
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    cond = np.inf if rcond == 0 or info != 0 else 1.0 / rcond
    return lu, piv, cond


def linear_solve(A, b):
    """Solve ``A x = b`` for square ``A`` (r x r) via LU with partial pivoting.

    ``b`` may be a vector of length r or an r x k matrix.  Raises
    :class:`SingularMatrixError` when the 1-norm condition estimate exceeds
    ``MAX_CONDITION``.
    """
    A, b = as_tensor(A), as_tensor(b)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or b.ndim not in (1, 2) or b.shape[0] != A.shape[0]:
        raise ShapeError("linear_solve", A.shape, b.shape)
    lu, piv, cond = _lu(A.data)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularMatrixError("linear_solve: matrix is numerically singular", cond)
    x = scipy.linalg.lu_solve((lu, piv), b.data, check_finite=False)

    def backward(g):
        gb = scipy.linalg.lu_solve((lu, piv), g, trans=1, check_finite=False)
        ga = -np.outer(gb, x) if gb.ndim == 1 else -(gb @ x.T)
        return ga, gb

    return _result(x, (A, b), backward, "linear_solve")


def condition_estimate(A):
    """1-norm condition estimate from the LU factors."""
    return _lu(np.asarray(A, dtype=np.float64))[2]


# -- testing aid ---------------------------------------------------------------


def central_difference(fn, array, index, step=1e-5):
    """Central finite difference of scalar ``fn()`` w.r.t. ``array[index]``.

    ``array`` is perturbed in place and restored afterwards.
    """
    orig = array[index]
    array[index] = orig + step
    fp = float(fn())
    array[index] = orig - step
    fm = float(fn())
    array[index] = orig
    return (fp - fm) / (2.0 * step)

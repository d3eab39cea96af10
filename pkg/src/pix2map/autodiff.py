"""A small reverse-mode differentiation engine on top of numpy.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a closure that pushes the output gradient back to them.
Calling :meth:`Tensor.backward` on a scalar sorts the recorded graph
topologically and runs each closure exactly once, in reverse order.

Row-wise primitives operate on the last axis; any leading axes are treated
as batch dimensions. Broadcasting is limited to a right operand whose shape
is a suffix of the left operand's shape (row-wise bias / mask).

Use float64 inputs for gradient checking; float32 is fine for training.
"""
from __future__ import annotations

import numpy as np

from .errors import DomainError, StructuralError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _float_dtype(data))
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise StructuralError("division is only supported by a scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise StructuralError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.asarray(grad, dtype=self.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free intermediate buffers; leaves keep their gradients
                node.grad = None


def _float_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float64


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _float_dtype(x)))


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def _result(data, parents, backward, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _check_suffix(a, b, name):
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise StructuralError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None
    if np.broadcast_shapes(a.shape, b.shape) != a.shape:
        raise StructuralError(f"{name}: right operand {b.shape} must broadcast into {a.shape}")


# --------------------------------------------------------------------------
# primitives


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise StructuralError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _accumulate(b, gb)

    return _result(out, (a, b), backward, "matmul")


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_suffix(a, b, "add")
    out = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), backward, "add")


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_suffix(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward, "mul")


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), backward, "scale")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise StructuralError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accumulate(t, piece)

    return _result(out, tensors, backward, "concat")


def row_select(a, index):
    """Gather rows ``a[..., index, :]`` (repeats allowed)."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim < 2:
        raise StructuralError("row_select needs a tensor with at least 2 dims")
    n = a.shape[-2]
    if index.size and (index.min() < -n or index.max() >= n):
        raise StructuralError(f"row_select: index out of range for {n} rows")
    out = np.take(a.data, index, axis=-2)

    def backward(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, -2, 0)
        np.add.at(moved, index, np.moveaxis(g, -2, 0))
        _accumulate(a, ga)

    return _result(out, (a,), backward, "row_select")


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _result(out, (a,), backward, "exp")


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    out = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _result(out, (a,), backward, "log")


def sqrt(a):
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / out)

    return _result(out, (a,), backward, "sqrt")


def relu(a):
    a = _as_tensor(a)
    on = a.data > 0
    out = np.where(on, a.data, 0).astype(a.dtype)

    def backward(g):
        _accumulate(a, g * on)

    return _result(out, (a,), backward, "relu")


def mean_pool_rows(a, weights=None):
    """Average over the row axis (-2). ``weights`` (constant, shape ``a.shape[:-1]``) masks padded rows."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise StructuralError("mean_pool_rows needs a tensor with at least 2 dims")
    if weights is None:
        raw = np.ones(a.shape[:-1], dtype=a.dtype)
    else:
        raw = np.asarray(weights, dtype=a.dtype)
        if raw.shape != a.shape[:-1]:
            raise StructuralError(f"mean_pool_rows: weights shape {raw.shape} != {a.shape[:-1]}")
    total = raw.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DomainError("mean_pool_rows: no rows to pool")
    # weighted sum first, then divide: identical rows pool back to themselves
    out = np.einsum("...n,...nd->...d", raw, a.data) / total
    w = raw / total

    def backward(g):
        _accumulate(a, w[..., :, None] * g[..., None, :])

    return _result(out, (a,), backward, "mean_pool_rows")


def masked_softmax_rows(a, mask=None):
    """Softmax along the last axis restricted to entries where ``mask`` is nonzero."""
    a = _as_tensor(a)
    if mask is None:
        m = np.ones(a.shape, dtype=bool)
    else:
        try:
            m = np.broadcast_to(np.asarray(mask).astype(bool), a.shape)
        except ValueError:
            raise StructuralError(f"masked_softmax_rows: mask shape {np.shape(mask)} vs {a.shape}") from None
    if not m.any(axis=-1).all():
        raise DomainError("masked_softmax_rows: a row has no admitted entries")
    z = np.where(m, a.data, -np.inf)
    z -= z.max(axis=-1, keepdims=True)
    out = np.exp(z, out=z)
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _result(out, (a,), backward, "masked_softmax_rows")


def layer_norm_rows(a, gamma, beta, eps=1e-5):
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise StructuralError("layer_norm_rows: gamma/beta must have shape (d,)")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            ga = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            _accumulate(a, ga)

    return _result(out, (a, gamma, beta), backward, "layer_norm_rows")


def l2_normalize_rows(a):
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise DomainError("l2_normalize_rows: zero-norm row")
    out = a.data / norm

    def backward(g):
        _accumulate(a, (g - out * (g * out).sum(axis=-1, keepdims=True)) / norm)

    return _result(out, (a,), backward, "l2_normalize_rows")


# shape plumbing needed for multi-head attention and loss reductions


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise StructuralError(f"reshape: {exc}") from None

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(out, (a,), backward, "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inverse = np.argsort(axes)
    out = np.transpose(a.data, axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _result(out, (a,), backward, "transpose")


def sum_all(a):
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    return _result(np.asarray(a.data.sum()), (a,), backward, "sum_all")


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient is zero where clipping is active."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)

    def backward(g):
        _accumulate(a, g * inside)

    return _result(out, (a,), backward, "clamp")


# --------------------------------------------------------------------------
# gradient checking


def gradient_check(f, inputs, step=1e-5, max_components=None, seed=0):
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` maps tensors (one per entry of ``inputs``) to a scalar tensor.
    The relative error of a component is ``|a - b| / max(|a|, |b|, 1e-8)``.
    With ``max_components`` set, a seeded random subset of components of
    each input is probed instead of all of them.
    """
    return gradient_check_many(lambda *xs: (f(*xs),), inputs, step, max_components, seed)[0]


def gradient_check_many(f, inputs, step=1e-5, max_components=None, seed=0):
    """:func:`gradient_check` for a function returning several scalar tensors.

    One finite-difference sweep serves every output, so checking the terms
    of a loss together costs about as much as checking one of them.
    Returns the worst relative error per output.
    """
    if not step > 0:
        raise DomainError("finite-difference step must be positive")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    n_out = len(f(*[Tensor(x) for x in arrays]))
    analytic = []
    for j in range(n_out):
        # fresh leaves per output so gradients do not accumulate across outputs
        leaves = [Tensor(x.copy(), requires_grad=True) for x in arrays]
        out = f(*leaves)[j]
        if np.size(out.data) != 1:
            raise StructuralError("gradient_check needs scalar outputs")
        if not np.isfinite(out.data):
            raise DomainError("function is not finite at the given inputs")
        out.backward()
        analytic.append([lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves])

    def evaluate(values):
        v = np.array([float(o.data) for o in f(*[Tensor(x) for x in values])])
        if not np.isfinite(v).all():
            raise DomainError("function is not finite near the given inputs")
        return v

    rng = np.random.default_rng(seed)
    worst = np.zeros(n_out)
    for k, x in enumerate(arrays):
        flat = x.reshape(-1)
        idx = np.arange(flat.size)
        if max_components is not None and flat.size > max_components:
            idx = np.sort(rng.choice(flat.size, size=max_components, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate(arrays)
            flat[i] = orig - step
            down = evaluate(arrays)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = np.array([float(analytic[j][k].reshape(-1)[i]) for j in range(n_out)])
            err = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
            worst = np.maximum(worst, err)
    return [float(w) for w in worst]

"""Reverse-mode automatic differentiation over numpy arrays.

Builds a dynamic computation graph of whole-array operations. Every op
returns a new Tensor holding forward values plus vector-Jacobian closures
for the parents that require gradients, so backward() is a single reverse
topological sweep with gradient accumulation.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "make_op", "constant", "detach", "backward", "gradients",
    "add", "sub", "mul", "neg", "scale", "matmul", "transpose", "reshape",
    "concat", "gather_rows", "tile_rows", "tsum", "tmean", "log", "exp",
    "relu", "gelu", "tanh", "softmax", "layer_norm", "minmax_norm",
]


class Tensor:
    """A node in the computation graph: values plus backward closures."""

    __slots__ = ("values", "grad", "requires_grad", "_vjps")

    def __init__(self, values, requires_grad: bool = False, _vjps=()):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = requires_grad or bool(_vjps)
        self._vjps = _vjps  # tuple of (parent Tensor, fn(out_grad) -> parent_grad)

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or isinstance(other, np.ndarray):
            raise TypeError("tensor division is restricted to scalar divisors")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)


def make_op(values, vjps) -> Tensor:
    """Create a Tensor from forward values and (parent, vjp) pairs.

    Pairs whose parent does not require a gradient are dropped; an op with
    no differentiable parents degenerates to a constant leaf.
    """
    live = tuple((p, fn) for p, fn in vjps if p.requires_grad)
    return Tensor(values, _vjps=live)


def constant(values, dtype=None) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype))


def detach(t: Tensor) -> Tensor:
    return t.detach()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _topo_order(root: Tensor):
    """Post-order DFS: parents appear before children in the result."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, seed=None) -> None:
    """Accumulate gradients into .grad for every node reachable from root."""
    if seed is None:
        if root.values.size != 1:
            raise ValueError("backward() without a seed needs a scalar root")
        seed = np.ones_like(root.values)
    root.grad = seed if root.grad is None else root.grad + seed
    for node in reversed(_topo_order(root)):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._vjps:
            pg = vjp(g)
            parent.grad = pg if parent.grad is None else parent.grad + pg


def gradients(root: Tensor, wrt, seed=None):
    """Gradients of root w.r.t. each tensor in wrt, without touching .grad.

    Used mid-training where a side computation (activation saliency) must
    not pollute parameter gradients.
    """
    if seed is None:
        if root.values.size != 1:
            raise ValueError("gradients() without a seed needs a scalar root")
        seed = np.ones_like(root.values)
    acc = {id(root): seed}
    for node in reversed(_topo_order(root)):
        g = acc.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._vjps:
            pg = vjp(g)
            pid = id(parent)
            acc[pid] = pg if pid not in acc else acc[pid] + pg
    return [acc.get(id(t)) for t in wrt]


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to shape, inverting numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        return make_op(a.values + b, [(a, lambda g: g)])
    a, b = _as_tensor(a), _as_tensor(b)
    return make_op(a.values + b.values, [
        (a, lambda g: _unbroadcast(g, a.values.shape)),
        (b, lambda g: _unbroadcast(g, b.values.shape)),
    ])


def sub(a, b) -> Tensor:
    return add(a, neg(_as_tensor(b)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(-a.values, [(a, lambda g: -g)])


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(_as_tensor(a), b)
    a, b = _as_tensor(a), _as_tensor(b)
    return make_op(a.values * b.values, [
        (a, lambda g: _unbroadcast(g * b.values, a.values.shape)),
        (b, lambda g: _unbroadcast(g * a.values, b.values.shape)),
    ])


def scale(a: Tensor, c) -> Tensor:
    c = float(c)  # python scalar: no dtype promotion under NEP 50
    return make_op(a.values * c, [(a, lambda g: g * c)])


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values @ b.values

    def ga(g):
        r = g @ np.swapaxes(b.values, -1, -2)
        return _unbroadcast(r, a.values.shape) if r.shape != a.values.shape else r

    def gb(g):
        r = np.swapaxes(a.values, -1, -2) @ g
        return _unbroadcast(r, b.values.shape) if r.shape != b.values.shape else r

    return make_op(out, [(a, ga), (b, gb)])


# ---------------------------------------------------------------------------
# shape


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_op(a.values.transpose(axes), [(a, lambda g: g.transpose(inv))])


def reshape(a: Tensor, shape) -> Tensor:
    old = a.values.shape
    return make_op(a.values.reshape(shape), [(a, lambda g: g.reshape(old))])


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.values for p in parts], axis=axis)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return make_op(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)

    def ga(g):
        out = np.zeros_like(a.values)
        np.add.at(out, idx, g)
        return out

    return make_op(a.values[idx], [(a, ga)])


def _getitem(a: Tensor, key) -> Tensor:
    def ga(g):
        out = np.zeros_like(a.values)
        np.add.at(out, key, g)
        return out

    return make_op(a.values[key], [(a, ga)])


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a [d] vector into an [n, d] matrix; backward sums the rows."""
    out = np.broadcast_to(a.values, (n,) + a.values.shape).copy()
    return make_op(out, [(a, lambda g: g.sum(axis=0))])


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def ga(g):
        if axis is None:
            return np.broadcast_to(g, a.values.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.values.shape).copy()

    return make_op(a.values.sum(axis=axis, keepdims=keepdims), [(a, ga)])


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.values.size
    else:
        n = a.values.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.values), [(a, lambda g: g / a.values)])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return make_op(out, [(a, lambda g: g * out)])


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return make_op(out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return make_op(np.where(mask, a.values, 0.0), [(a, lambda g: g * mask)])


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.values
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def ga(g):
        sech2 = 1.0 - t * t
        return g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x))

    return make_op(out, [(a, ga)])


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along axis (max-subtracted)."""
    x = a.values
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def ga(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return make_op(out, [(a, ga)])


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = gamma.values * xhat + beta.values
    d = x.shape[-1]

    def ga(g):
        gx = g * gamma.values
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        return inv * (gx - m1 - xhat * m2)

    lead = tuple(range(x.ndim - 1))
    return make_op(out, [
        (a, ga),
        (gamma, lambda g: (g * xhat).sum(axis=lead) if lead else g * xhat),
        (beta, lambda g: g.sum(axis=lead) if lead else g),
    ])


def minmax_norm(a: Tensor) -> Tensor:
    """Rescale each column of an [N, d] matrix to [0, 1].

    Constant columns map to all zeros. The gradient routes through the
    extremal elements analytically; ties go to the first (lowest-index)
    argmin/argmax so finite differences agree away from exact ties.
    """
    x = a.values
    if x.ndim != 2:
        raise ValueError("minmax_norm expects an [N, d] matrix")
    mn = x.min(axis=0)
    mx = x.max(axis=0)
    r = mx - mn
    const = r == 0
    safe_r = np.where(const, 1.0, r)
    out = (x - mn) / safe_r
    out[:, const] = 0.0
    imin = np.argmin(x, axis=0)
    imax = np.argmax(x, axis=0)
    cols = np.arange(x.shape[1])

    def ga(g):
        g = np.where(const, 0.0, g)
        gx = g / safe_r
        # d out_ij / d mn_j = (out_ij - 1)/r_j ; d out_ij / d mx_j = -out_ij/r_j
        gmn = (g * (out - 1.0)).sum(axis=0) / safe_r
        gmx = (g * -out).sum(axis=0) / safe_r
        gx[imin, cols] += gmn
        gx[imax, cols] += gmx
        return gx

    return make_op(out, [(a, ga)])
